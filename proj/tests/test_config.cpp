#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "homogelast/config.hpp"

using namespace homogelast;

TEST_CASE("config round trip through serialization") {
    ExperimentConfig cfg;
    cfg.density.kind = "layered";
    cfg.density.breakpoints = {0.0, 0.25, 1.0};
    cfg.density.stiffness = {2.0, 3.5};
    cfg.grid_n = 24;
    cfg.fsample.radius = 0.037;
    cfg.load.f = Vec2(0.001, -0.02);
    cfg.load.g_kind = LoadData::BoundaryKind::Rigid;
    cfg.load.g_theta = 0.5;
    cfg.eps_list = {0.25, 0.125};
    cfg.seed = 999;

    std::string text = cfg.serialize();
    ExperimentConfig back = ExperimentConfig::parse(text);
    CHECK(back.serialize() == text);
    CHECK(back.hash() == cfg.hash());
    CHECK(back.density.breakpoints == cfg.density.breakpoints);
    CHECK(back.load.g_theta == cfg.load.g_theta);
    CHECK(back.fsample.radius == cfg.fsample.radius);
}

TEST_CASE("json alternative encoding") {
    std::string json = R"({
      "density": {"kind": "layered", "breakpoints": [0, 0.5, 1], "stiffness": [1, 4],
                   "alpha": 0.1, "p": 4},
      "cell": {"grid_n": 16},
      "load": {"f": [0, -0.01], "g_kind": "identity"}
    })";
    ExperimentConfig cfg = ExperimentConfig::parse(json);
    CHECK(cfg.grid_n == 16);
    CHECK(cfg.density.stiffness == std::vector<double>{1.0, 4.0});
    CHECK(cfg.load.f(1) == -0.01);
    // builds a valid model
    DensityModel m = cfg.density.build();
    CHECK(m.kind() == DensityModel::Kind::Layered);
}

TEST_CASE("config errors name the offending key") {
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse("[density]\nkind = layered\n"
                                                 "breakpoints = 0,0.7,0.4,1\nstiffness = 1,2,3\n"),
                         doctest::Contains("density.breakpoints"), ConfigError);
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse("[cell]\ngrid_n = 2\n"),
                         doctest::Contains("cell.grid_n"), ConfigError);
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse("[load]\nr = 1.5\n"),
                         doctest::Contains("load.r"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("[cell]\ngrid_n\n"), ConfigError);
}

TEST_CASE("defaults are applied and echoed") {
    ExperimentConfig cfg = ExperimentConfig::parse("");
    CHECK(cfg.eps_list.size() == 4);  // documented default
    CHECK(cfg.mesh_factor == 16);
    std::string text = cfg.serialize();
    CHECK(text.find("list = 0.125,0.0625,0.03125,0.015625") != std::string::npos);
}

TEST_CASE("fsample respects the strain radius") {
    FSampleSpec spec;
    spec.radius = 0.05;
    spec.count = 30;
    for (const Mat2& F : spec.sample()) CHECK(dist_so(F) <= 0.05 + 1e-12);
    // reproducible
    FSampleSpec spec2 = spec;
    std::vector<Mat2> a = spec.sample(), b = spec2.sample();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK((a[i] - b[i]).norm() == 0.0);
}
