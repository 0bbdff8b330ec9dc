#pragma once

// A tiny untrained model with a matching synthetic task, small enough for unit tests.

#include "rpt/model.hpp"
#include "rpt/synth.hpp"

namespace fixture {

inline rpt::ModelConfig tiny_model() {
  rpt::ModelConfig c;
  c.num_layers = 3;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.vocab_size = 128;
  c.max_seq_len = 32;
  c.prefix_len = 4;
  return c;
}

inline rpt::SyntheticTask tiny_task(std::uint64_t seed, int test_count = 40) {
  rpt::SyntheticTaskSpec s;
  s.vocab_size = 128;
  s.train_count = 48;
  s.dev_count = 24;
  s.test_count = test_count;
  s.pretrain_count = 20;
  return rpt::synth_dataset(s, seed);
}

struct Setup {
  rpt::ModelConfig cfg = tiny_model();
  rpt::SyntheticTask task;
  rpt::MicroLM lm;
  rpt::PrefixParameters prefix;

  explicit Setup(std::uint64_t seed, int test_count = 40)
      : task(tiny_task(seed, test_count)),
        lm(cfg, rpt::LMParameters::init(cfg, seed + 1)),
        prefix(rpt::PrefixParameters::init(cfg, lm.params(), seed + 2)) {}
};

}  // namespace fixture
