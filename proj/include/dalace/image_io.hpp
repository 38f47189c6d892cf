#pragma once

#include <string>
#include <vector>

#include "dalace/evaluator.hpp"
#include "dalace/tensor.hpp"

namespace dalace::imageio {

// 8-bit grayscale PNG; values clamped from [0,1].
void write_png_gray(const std::string& path, const Tensor<float>& image);

// Tile [H,W] images into a rows x cols grid with a 2px separator.
Tensor<float> make_grid(const std::vector<Tensor<float>>& images, int cols);

// Fig-6-style layout: for each modality two rows, raw renderings of the
// requested anatomies above their domain-agnostic images.
void export_agnostic_grid(eval::ModelState<float>& state, const phantom::DatasetManifest& m,
                          const std::vector<int64_t>& anatomy_seeds,
                          const phantom::SplitOptions& opt, const std::string& path);

// Fig-7-style triplet: content image, style image, transferred image.
void export_transfer_triplet(eval::ModelState<float>& state, const phantom::DatasetManifest& m,
                             int64_t content_seed, int64_t style_seed, int style_modality,
                             const phantom::SplitOptions& opt, const std::string& path);

}  // namespace dalace::imageio
