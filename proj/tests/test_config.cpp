#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "mazur/config.hpp"

using namespace mazur;

namespace {

RunConfig from_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

/// Message of the ValidationError thrown while parsing `text`.
std::string error_of(const std::string& text) {
  try {
    from_text(text);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, Defaults) {
  const auto cfg = from_text("");
  EXPECT_EQ(cfg.system.name, "oscillator");
  EXPECT_EQ(cfg.observable, "q1^2");
  EXPECT_EQ(cfg.beta, 1.0);
  EXPECT_EQ(cfg.saturation_degree(), 3);
  EXPECT_EQ(cfg.d_probe(), 5);
  EXPECT_EQ(cfg.max_degree(), 5);
  EXPECT_FALSE(cfg.sampler.proposal_scale.has_value());
}

TEST(Config, FullExample) {
  const auto cfg = from_text(
      "[system]\nname = pendulum\n"
      "[observable]\nA = p1\n"
      "[gibbs]\nbeta = 2.5\nn = 1000\nburn_in = 10\nthin = 2\nproposal_scale = 0.7\nseed = 5\n"
      "[dynamics]\nT = 20\ndt = 0.05\ntrajectories = 100\ndrift_tolerance = 1e-3\n"
      "[bounds]\ndegrees = 0, 2, 4\nsaturation_degree = 2\nd_probe = 5\njitter = 1e-10\nbootstrap = 50\n"
      "[labeler]\nhigh = H > 1\nlow = H <= 1\n"
      "[output]\ndir = out/x\n");
  EXPECT_EQ(cfg.system.name, "pendulum");
  EXPECT_EQ(cfg.beta, 2.5);
  EXPECT_EQ(cfg.sampler.n, 1000u);
  EXPECT_EQ(cfg.sampler.thin, 2u);
  EXPECT_EQ(*cfg.sampler.proposal_scale, 0.7);
  EXPECT_EQ(cfg.sampler.seed, 5u);
  EXPECT_EQ(cfg.dynamics.max_samples, 100u);
  EXPECT_EQ(cfg.bounds.degrees, (std::vector<int>{0, 2, 4}));
  EXPECT_EQ(cfg.saturation_degree(), 2);
  EXPECT_EQ(cfg.d_probe(), 5);
  ASSERT_EQ(cfg.labeler.size(), 2u);
  EXPECT_EQ(cfg.labeler[0].first, "high");
  EXPECT_EQ(cfg.output_dir, "out/x");
  const auto sys = build_system(cfg.system);
  const auto lab = build_labeler(cfg, sys);
  ASSERT_TRUE(lab.has_value());
  const std::vector<double> x = {0.0, 3.0};
  EXPECT_EQ((*lab)(x), 0u);
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_NE(error_of("[gibbs]\nbeta = 0\n").find("gibbs.beta"), std::string::npos);
  EXPECT_NE(error_of("[gibbs]\nbeta = abc\n").find("gibbs.beta"), std::string::npos);
  EXPECT_NE(error_of("[gibbs]\nbetta = 1\n").find("gibbs.betta: unknown"), std::string::npos);
  EXPECT_NE(error_of("[system]\nname = rotor\n").find("system.name"), std::string::npos);
  EXPECT_NE(error_of("[observable]\nA = q3\n").find("observable.A"), std::string::npos);
  EXPECT_NE(error_of("[bounds]\ndegrees = 0,11\n").find("bounds.degrees"), std::string::npos);
  EXPECT_NE(error_of("[bounds]\ndegrees = 1,x\n").find("bounds.degrees"), std::string::npos);
  EXPECT_NE(error_of("[bounds]\ndegrees = 2\nd_probe = 2\n").find("bounds.d_probe"), std::string::npos);
  EXPECT_NE(error_of("[dynamics]\nT = 1\ndt = 2\n").find("dynamics.dt"), std::string::npos);
  EXPECT_NE(error_of("[labeler]\nbad = p1 >\n").find("labeler.bad"), std::string::npos);
  EXPECT_NE(error_of("[system]\nname = custom\nr = 1\nhamiltonian = p1*q1\n").find("separable"), std::string::npos);
  EXPECT_NE(error_of("[system]\nname = custom\nr = 1\n").find("system.hamiltonian"), std::string::npos);
}

TEST(Config, BasisCap) {
  const std::string custom =
      "[system]\nname = custom\nr = 5\nhamiltonian = (p1^2+p2^2+p3^2+p4^2+p5^2+q1^2+q2^2+q3^2+q4^2+q5^2)/2\n"
      "conserved = (p1^2+q1^2)/2; (p2^2+q2^2)/2; (p3^2+q3^2)/2; (p4^2+q4^2)/2\n";
  EXPECT_NO_THROW(from_text(custom + "[bounds]\ndegrees = 0,1,2,3\nd_probe = 6\n"));
  EXPECT_NE(error_of(custom + "[bounds]\ndegrees = 0,8\nd_probe = 10\n").find("exceeds the cap"), std::string::npos);
}

TEST(Config, ShippedConfigsLoad) {
  for (const char* name : {"oscillator.ini", "pendulum.ini", "product.ini", "custom.ini"}) {
    const auto cfg = load_config(std::string(MAZUR_CONFIG_DIR) + "/" + name);
    EXPECT_NO_THROW(build_system(cfg.system)) << name;
  }
  const auto custom = load_config(std::string(MAZUR_CONFIG_DIR) + "/custom.ini");
  EXPECT_EQ(build_system(custom.system).k(), 2u);
  EXPECT_THROW(load_config("/nonexistent/x.ini"), ValidationError);
}
