#include "dfm/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "dfm/error.hpp"

namespace dfm {

std::uint8_t to_byte(double x) {
  const double v = std::round(255.0 * (x + 1.0) / 2.0);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

float from_byte(std::uint8_t b) { return static_cast<float>(2.0 * b / 255.0 - 1.0); }

std::string encode_pnm(const Tensor<float>& image) {
  const int C = image.channels(), H = image.height(), W = image.width();
  if (C != 1 && C != 3) throw InvalidInput("pnm: only 1 or 3 channels can be written, got " + std::to_string(C));
  std::string out = (C == 1 ? "P5\n" : "P6\n") + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  const std::size_t head = out.size();
  out.resize(head + static_cast<std::size_t>(C) * H * W);
  std::size_t k = head;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < C; ++c) out[k++] = static_cast<char>(to_byte(image(c, y, x)));
    }
  }
  return out;
}

Tensor<float> decode_pnm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip = [&] {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip();
    long v = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])) && pos - start < 9) {
      v = v * 10 + (bytes[pos++] - '0');
    }
    if (pos == start) throw InvalidInput("pnm: malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw InvalidInput("pnm: not a binary PGM/PPM file");
  }
  const int C = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  const long W = number(), H = number(), maxval = number();
  if (W < 1 || H < 1) throw InvalidInput("pnm: empty image");
  if (maxval != 255) throw InvalidInput("pnm: only 8-bit images (maxval 255) are supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw InvalidInput("pnm: malformed header");
  }
  ++pos;
  const std::size_t n = static_cast<std::size_t>(C) * W * H;
  if (bytes.size() - pos < n) throw InvalidInput("pnm: truncated pixel data");
  Tensor<float> img(C, static_cast<int>(H), static_cast<int>(W));
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < C; ++c) img(c, y, x) = from_byte(static_cast<std::uint8_t>(bytes[pos++]));
    }
  }
  return img;
}

void write_pnm(const std::filesystem::path& path, const Tensor<float>& image) {
  const auto bytes = encode_pnm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

Tensor<float> read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read image " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_pnm(ss.str());
  } catch (const InvalidInput& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) throw InvalidInput("not a directory: " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int label_from_name(const std::string& stem) {
  static const std::regex re("(^|_)c([0-9]+)(_|$)");
  std::smatch m;
  if (!std::regex_search(stem, m, re)) return -1;
  return std::stoi(m[2].str());
}

long long seed_from_name(const std::string& stem) {
  static const std::regex re("(^|_)s([0-9]+)(_|$)");
  std::smatch m;
  if (!std::regex_search(stem, m, re)) return -1;
  return std::stoll(m[2].str());
}

DirectoryDataset::DirectoryDataset(const std::filesystem::path& dir, Resolution resolution, int channels,
                                   int num_classes)
    : resolution_(resolution), channels_(channels), num_classes_(num_classes) {
  auto add = [&](const std::filesystem::path& p, int label) {
    auto img = read_pnm(p);
    if (img.channels() != channels || img.height() != resolution.height || img.width() != resolution.width) {
      throw InvalidInput(p.string() + " is " + std::to_string(img.channels()) + "x" + std::to_string(img.height()) +
                         "x" + std::to_string(img.width()) + ", expected " + std::to_string(channels) + "x" +
                         resolution.str());
    }
    if (label < 0) label = label_from_name(p.stem().string());
    if (label < 0) label = 0;
    if (label >= num_classes) throw InvalidInput(p.string() + ": class " + std::to_string(label) + " out of range");
    items_.push_back({std::move(img), label});
  };
  for (const auto& p : list_images(dir)) add(p, -1);
  std::vector<std::filesystem::path> subdirs;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_directory()) subdirs.push_back(e.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  for (const auto& d : subdirs) {
    const auto name = d.filename().string();
    if (name.empty() || !std::all_of(name.begin(), name.end(), [](char ch) { return std::isdigit(ch); })) continue;
    for (const auto& p : list_images(d)) add(p, std::stoi(name));
  }
  if (items_.empty()) throw InvalidInput("no images found in " + dir.string());
}

LabeledImage DirectoryDataset::get(long index) const {
  if (index < 0 || index >= size()) throw InvalidInput("dataset index out of range");
  return items_[static_cast<std::size_t>(index)];
}

}  // namespace dfm
