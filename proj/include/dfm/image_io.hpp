#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dfm/tensor.hpp"
#include "dfm/train.hpp"

namespace dfm {

/// round(255 (x + 1) / 2), clamped to [0, 255].
std::uint8_t to_byte(double x);
/// Inverse of to_byte on the byte grid: 2 b / 255 - 1.
float from_byte(std::uint8_t b);

/// Binary PGM (1 channel) or PPM (3 channels), 8-bit, values in [-1, 1].
std::string encode_pnm(const Tensor<float>& image);
Tensor<float> decode_pnm(const std::string& bytes);
void write_pnm(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_pnm(const std::filesystem::path& path);

/// Sorted .pgm/.ppm files directly inside `dir`.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Images from a directory. Labels come from a `_c<k>` filename token or a class
/// subdirectory named by its index; images without either get label 0.
class DirectoryDataset : public Dataset {
 public:
  DirectoryDataset(const std::filesystem::path& dir, Resolution resolution, int channels, int num_classes);
  long size() const override { return static_cast<long>(items_.size()); }
  int channels() const override { return channels_; }
  Resolution resolution() const override { return resolution_; }
  int num_classes() const override { return num_classes_; }
  LabeledImage get(long index) const override;

 private:
  std::vector<LabeledImage> items_;
  Resolution resolution_;
  int channels_;
  int num_classes_;
};

/// Class encoded as `_c<k>` in a filename stem, or -1.
int label_from_name(const std::string& stem);
/// Seed encoded as `_s<n>` in a filename stem, or -1.
long long seed_from_name(const std::string& stem);

}  // namespace dfm
