#include <string>

#include "doctest.h"
#include "rpt/config.hpp"

using namespace rpt;

namespace {

std::string error_of(const std::string& json) {
  try {
    parse_config(json);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("an empty document yields the defaults") {
  const ExperimentConfig c = parse_config("{}");
  const ExperimentConfig d = ExperimentConfig::defaults();
  CHECK(c.model == d.model);
  CHECK(c.data == d.data);
  CHECK(c.defense.num_layers == d.defense.num_layers);
  CHECK(c.seed == d.seed);
}

TEST_CASE("unknown keys are reported with their full path") {
  CHECK(error_of(R"({"modle": {}})").find("'modle'") != std::string::npos);
  CHECK(error_of(R"({"defense": {"learning_rate": 0.1, "batch": {"sise": 2}}})").find("'defense.batch.sise'") != std::string::npos);
}

TEST_CASE("dynamic normalization with single-sample fixed batches is rejected before compute") {
  const std::string msg = error_of(
      R"({"defense": {"normalization": "dynamic", "batch": {"mode": "fixed", "size": 1}, "learning_rate": 0.1}})");
  CHECK(msg.find("dynamic") != std::string::npos);
  CHECK(error_of(
            R"({"defense": {"normalization": "dynamic", "batch": {"mode": "fixed", "size": 2}, "learning_rate": 0.1}})")
            .empty());
}

TEST_CASE("type errors and bad enum names are config errors") {
  CHECK_FALSE(error_of(R"({"seed": "one"})").empty());
  CHECK_FALSE(error_of(R"({"defense": {"learning_rate": 0.1, "layer_end": "middle"}})").empty());
  CHECK_FALSE(error_of(R"({"train": {"methods": []}})").empty());
  CHECK_FALSE(error_of(R"({"attacks": {"noise_budget": 0}})").empty());
  CHECK_FALSE(error_of(R"({"model": {"vocab_size": 300}})").empty());
  CHECK_FALSE(error_of(R"({"inputs": {"lm": "/nonexistent/lm.rptf"}})").empty());
  CHECK_FALSE(error_of("[1, 2").empty());
}

TEST_CASE("static normalization parses to the fixed mode and round-trips") {
  const ExperimentConfig c = parse_config(R"({"defense": {"normalization": "static", "learning_rate": 0.03}})");
  CHECK(c.defense.normalization == Normalization::fixed);
  REQUIRE(c.defense.learning_rate.has_value());
  CHECK(*c.defense.learning_rate == doctest::Approx(0.03f));
  const ExperimentConfig again = parse_config(config_to_json(c));
  CHECK(again.defense.normalization == Normalization::fixed);
  CHECK(config_to_json(again) == config_to_json(c));
}
