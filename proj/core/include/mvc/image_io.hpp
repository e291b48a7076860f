#pragma once

#include <filesystem>

#include "mvc/tensor.hpp"

namespace mvc {

/// Writes a (1,3,H,W) or (3,H,W) tensor in [0,1] as binary PPM (P6, 8-bit).
void write_ppm(const std::filesystem::path& path, const Tensor& image);
/// Reads a P6 PPM into a (1,3,H,W) tensor scaled to [0,1].
Tensor read_ppm(const std::filesystem::path& path);

/// Writes a single-channel (H,W) tensor as binary PGM (P5, 8-bit); values are
/// expected to already lie in [0,1].
void write_pgm(const std::filesystem::path& path, const Tensor& gray);
Tensor read_pgm(const std::filesystem::path& path);

/// Raw tensor container ("MVTF"): exact little-endian doubles, lossless.
void write_tensor_file(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor_file(const std::filesystem::path& path);

}  // namespace mvc
