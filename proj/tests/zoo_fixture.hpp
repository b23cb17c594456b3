#pragma once

// Default-spec context with the pretrained zoo, shared by every test binary
// through the on-disk cache (trained on first use).

#include "vlpa/harness.hpp"

namespace vlpa::testkit {

inline ExperimentSpec default_spec() {
  ExperimentSpec s;
  s.cache_dir = VLPA_TEST_CACHE;
  return s;
}

inline const RunContext& shared_context() {
  static const RunContext ctx = prepare(default_spec(), 1);
  return ctx;
}

}  // namespace vlpa::testkit
