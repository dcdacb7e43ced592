#ifndef CAVLAB_IMAGE_IO_HPP
#define CAVLAB_IMAGE_IO_HPP

#include <string>

#include "cavlab/tensor.hpp"

namespace cavlab {

// Images are [3,H,W] in [0,1]; stored as 8-bit RGB PNG. Values are
// quantized to k/255 on write, and read back as float(k)/255.
void write_png(const std::string& path, const Tensor& rgb);
Tensor read_png(const std::string& path);

// Binary masks [H,W] as binary PGM (P5, maxval 255).
void write_pgm(const std::string& path, const Tensor& mask);
Tensor read_pgm(const std::string& path);

float quantize_unit(float v);

}  // namespace cavlab

#endif  // CAVLAB_IMAGE_IO_HPP
