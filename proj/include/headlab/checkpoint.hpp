#pragma once

#include "headlab/graph.hpp"

#include <string>

namespace headlab {

// Flat, versioned parameter container: a JSON metadata string (model
// identity) followed by name -> shape + values entries and a checksum. See
// README for the byte layout; the layout is stable across releases.
void save_checkpoint(const ParameterStore& params, const std::string& meta_json,
                     const std::string& path);

struct LoadedCheckpoint {
  std::string meta_json;
  // entries in file order
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies loaded tensors into an existing store; every parameter must be
// present with a matching shape.
void restore_parameters(const LoadedCheckpoint& ckpt, ParameterStore& params);

}  // namespace headlab
