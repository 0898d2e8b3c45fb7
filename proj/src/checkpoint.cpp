#include "traject/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace traject {

namespace {

std::string format_shape(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out;
}

Shape parse_shape(const std::string& text) {
  Shape shape;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, 'x')) shape.push_back(std::stoul(part));
  return shape;
}

std::uint64_t to_little_endian(std::uint64_t x) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t y = 0;
    for (int i = 0; i < 8; ++i) y |= ((x >> (8 * i)) & 0xffULL) << (8 * (7 - i));
    return y;
  }
  return x;
}

struct Entry {
  Shape shape;
  std::size_t offset = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream manifest(path);
  std::ofstream blob(path + ".bin", std::ios::binary);
  if (!manifest || !blob) throw Error("cannot write checkpoint " + path);
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    manifest << name << ' ' << format_shape(t.shape()) << " f64 " << offset << '\n';
    for (double v : t.data()) {
      auto bits = to_little_endian(std::bit_cast<std::uint64_t>(v));
      blob.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    offset += t.size() * sizeof(double);
  }
  if (!manifest || !blob) throw Error("failed writing checkpoint " + path);
}

void load_checkpoint(const std::string& path, const std::vector<NamedTensor>& targets) {
  std::ifstream manifest(path);
  if (!manifest) throw Error("cannot open checkpoint " + path);
  std::map<std::string, Entry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string name, shape, dtype;
    std::size_t offset = 0;
    if (!(fields >> name >> shape >> dtype >> offset) || dtype != "f64") {
      throw ParseError(line_no, "malformed checkpoint manifest entry");
    }
    entries[name] = {parse_shape(shape), offset};
  }

  std::ifstream blob(path + ".bin", std::ios::binary);
  if (!blob) throw Error("cannot open checkpoint blob " + path + ".bin");
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());

  if (entries.size() != targets.size()) {
    throw Error("checkpoint holds " + std::to_string(entries.size()) + " tensors, model expects " +
                std::to_string(targets.size()));
  }
  for (const auto& [name, t] : targets) {
    auto it = entries.find(name);
    if (it == entries.end()) throw Error("checkpoint missing tensor " + name);
    if (it->second.shape != t.shape()) {
      throw Error("checkpoint tensor " + name + " has shape " + shape_string(it->second.shape) +
                  ", model expects " + shape_string(t.shape()));
    }
    const std::size_t n = t.size();
    if (it->second.offset + n * sizeof(double) > bytes.size()) {
      throw Error("checkpoint blob too short for " + name);
    }
    auto dst = Tensor(t).data();
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, bytes.data() + it->second.offset + i * sizeof bits, sizeof bits);
      dst[i] = std::bit_cast<double>(to_little_endian(bits));
    }
  }
}

}  // namespace traject
