#pragma once

#include "headlab/box.hpp"
#include "headlab/feature_map.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace headlab {

// A synthetic benchmark frame: a feature map with embedded class-keyed object
// signatures plus the ground-truth boxes that produced them.
struct Scene {
  std::string id;
  double image_w = 0;
  double image_h = 0;
  FeatureMap features;
  std::vector<GroundTruth> ground_truths;
};

// Generator settings. Object footprints have deliberately soft edges
// (boundary_softness) and sizes spanning all three area buckets, so both
// localization and size inference stay nontrivial.
struct SynthConfig {
  int num_classes = 10;
  int min_objects = 2;
  int max_objects = 10;
  double min_size = 8.0;    // characteristic object size, log-uniform
  double max_size = 160.0;
  double aspect_low = 2.0 / 3.0;
  double aspect_high = 1.5;
  double boundary_softness = 0.3;  // edge falloff sigma as a fraction of size
  double noise_sigma = 0.05;
  int channels = 16;
  double stride = 4.0;
  double image_size = 256.0;
  int scenes = 200;
  int index_offset = 0;  // shifts scene indices; disjoint splits share a seed
  std::uint64_t seed = 7;
};

void validate(const SynthConfig& config);

// Per-class channel signatures, K x C orthonormal rows derived from the
// config seed. Throws if the requested K signatures cannot be linearly
// independent in C channels.
Eigen::MatrixXd class_signatures(const SynthConfig& config);

// Deterministic per (config.seed, index). `index` is the absolute scene index
// (config.index_offset already applied by callers that iterate a split).
Scene generate_scene(const SynthConfig& config, int index);

// Mirrors the feature map along width and reflects every box: x -> W - x.
Scene horizontal_flip(const Scene& scene);

// Nearest-signature class readout at the box center cell; the sanity floor
// for learnability of the benchmark.
int classify_at_center(const Scene& scene, const Eigen::MatrixXd& signatures,
                       const Box& box);

struct Dataset {
  SynthConfig config;  // echo of the generator settings
  std::vector<Scene> scenes;
};

Dataset generate_dataset(const SynthConfig& config);

// Versioned little-endian container with a checksum; see README for the byte
// layout. Reading verifies the checksum before returning any data.
void write_dataset(std::span<const Scene> scenes, const SynthConfig& config,
                   const std::string& path);
Dataset read_dataset(const std::string& path);

// Annotation exchange: a JSON container of images, categories and
// top-left-corner bboxes. Importing converts to the center convention and
// remaps category ids to 1..K by their order in the categories list.
struct AnnotatedImage {
  std::string id;
  double width = 0;
  double height = 0;
  std::vector<GroundTruth> ground_truths;
};

struct IngestResult {
  std::vector<AnnotatedImage> images;
  std::vector<std::string> categories;    // names in remapped order
  std::vector<std::string> diagnostics;   // per skipped record
};

IngestResult ingest_annotations(const std::string& path);
void write_annotations(std::span<const Scene> scenes, int num_classes,
                       const std::string& path);

}  // namespace headlab
