// Shared fixtures for the unit tests.
#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "lgsa/lgsa.hpp"

namespace lgsa::test {

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("lgsa_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& child = "") const { return child.empty() ? path_.string() : (path_ / child).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Mask random_mask(std::mt19937_64& gen, std::size_t h, std::size_t w, double p) {
  std::bernoulli_distribution d(p);
  Mask m(h, w);
  for (auto& b : m.bits) b = d(gen) ? 1 : 0;
  return m;
}

inline Tensor<double> random_tensor(std::mt19937_64& gen, Shape shape, double lo = -1, double hi = 1,
                                    bool requires_grad = false) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(gen);
  return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

inline SynthSpec small_spec(std::size_t volumes = 4, std::size_t depth = 5, std::size_t size = 32) {
  SynthSpec s;
  s.volumes = volumes;
  s.depth = depth;
  s.height = s.width = size;
  return s;
}

inline NetConfig tiny_net(std::size_t levels = 3, std::size_t base = 4, std::size_t size = 16) {
  NetConfig c;
  c.levels = levels;
  c.base_channels = base;
  c.input_size = size;
  return c;
}

}  // namespace lgsa::test
