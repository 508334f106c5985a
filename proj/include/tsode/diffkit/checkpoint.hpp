#pragma once
#include <string>
#include <vector>

#include "tsode/diffkit/tensor.hpp"

namespace tsode::diffkit {

struct NamedTensor {
  std::string name;
  Tensor t;
};

// Binary checkpoint with raw IEEE-754 payload; save/load round-trips are
// bit-exact. Corrupt or truncated files raise ConfigFault.
void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

}  // namespace tsode::diffkit
