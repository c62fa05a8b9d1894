#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "fedkappa/common/error.hpp"
#include "fedkappa/common/rng.hpp"
#include "fedkappa/nn/model.hpp"
#include "oracles/gradcheck.hpp"

// Checks that `expr` throws fedkappa::Error carrying `expected_code`.
#define CHECK_THROWS_AS_CODE(expr, expected_code)                                   \
  do {                                                                              \
    bool fk_thrown_ = false;                                                        \
    try {                                                                           \
      (void)(expr);                                                                 \
    } catch (const ::fedkappa::Error& fk_e_) {                                      \
      fk_thrown_ = true;                                                            \
      CHECK_MESSAGE(fk_e_.code() == (expected_code), "got: ", fk_e_.what());        \
    }                                                                               \
    CHECK_MESSAGE(fk_thrown_, "expected fedkappa::Error from " #expr);              \
  } while (false)

namespace testutil {

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fedkappa_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
