#pragma once

// Checkpoint file:
//   8 bytes   magic "NQCKPT1\0"
//   u64 LE    header length in bytes
//   header    JSON object: name -> {"dtype": "f32", "shape": [...], "offset": n}
//   blobs     raw little-endian f32 data; offsets count from the first blob byte
// Optimizer state is stored as adam.m.<name>, adam.v.<name> and adam.step.

#include <stdexcept>
#include <string>

#include "nearquery/nn.hpp"
#include "nearquery/optim.hpp"

namespace nq {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr char kCheckpointMagic[8] = {'N', 'Q', 'C', 'K', 'P', 'T', '1', '\0'};

void save_checkpoint(const std::string& path, const ParamStore<float>& params,
                     const AdamState<float>* adam = nullptr);

// All-or-nothing: nothing is modified unless every tensor validates.
void load_checkpoint(const std::string& path, ParamStore<float>& params,
                     AdamState<float>* adam = nullptr);

}  // namespace nq
