#include "rave/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <map>
#include <stdexcept>

namespace rave {

namespace {

constexpr char kMagic[8] = {'R', 'A', 'V', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) {
    bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  }
  out.write(bytes, 8);
}

void write_u32(std::ostream& out, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) {
    bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  }
  out.write(bytes, 4);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) {
    throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  }
  return v;
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (!in) {
    throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  }
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const std::uint64_t len = read_u64(in);
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) {
    throw std::runtime_error("checkpoint: truncated file");
  }
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  }
  out.write(kMagic, 8);
  write_u32(out, kVersion);
  write_u64(out, ckpt.step);
  write_string(out, ckpt.spec_json);
  write_u64(out, ckpt.tensors.size());
  for (const auto& [name, tensor] : ckpt.tensors) {
    write_string(out, name);
    write_u64(out, static_cast<std::uint64_t>(tensor.rows()));
    write_u64(out, static_cast<std::uint64_t>(tensor.cols()));
    for (int i = 0; i < tensor.rows(); ++i) {
      for (int j = 0; j < tensor.cols(); ++j) {
        write_u64(out, std::bit_cast<std::uint64_t>(tensor(i, j)));
      }
    }
  }
  out.flush();
  if (!out) {
    throw std::runtime_error("write failed for " + path.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path.string());
  }
  char magic[8];
  in.read(magic, 8);
  if (!in || !std::equal(magic, magic + 8, kMagic)) {
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  }
  const std::uint32_t version = read_u32(in);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.step = read_u64(in);
  ckpt.spec_json = read_string(in);
  const std::uint64_t count = read_u64(in);
  ckpt.tensors.reserve(count);
  for (std::uint64_t t = 0; t < count; ++t) {
    std::string name = read_string(in);
    const auto rows = static_cast<int>(read_u64(in));
    const auto cols = static_cast<int>(read_u64(in));
    if (rows < 0 || cols < 0) {
      throw std::runtime_error("checkpoint: invalid tensor shape");
    }
    Matrix tensor(rows, cols);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) {
        tensor(i, j) = std::bit_cast<double>(read_u64(in));
      }
    }
    ckpt.tensors.emplace_back(std::move(name), std::move(tensor));
  }
  return ckpt;
}

Checkpoint checkpoint_from_model(const ToyModel& model, std::uint64_t step,
                                 const std::string& spec_json) {
  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.spec_json = spec_json;
  for (const auto& [name, tensor] : model.params().named_tensors()) {
    ckpt.tensors.emplace_back(name, *tensor);
  }
  return ckpt;
}

void load_params_from_checkpoint(const Checkpoint& ckpt, ModelParams& params) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (!by_name.emplace(name, &tensor).second) {
      throw std::runtime_error("checkpoint: duplicate tensor " + name);
    }
  }
  auto targets = params.named_tensors();
  if (targets.size() != by_name.size()) {
    throw std::runtime_error("checkpoint: tensor set does not match the model");
  }
  for (auto& [name, target] : targets) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint: missing tensor " + name);
    }
    if (!target->same_shape(*it->second)) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    }
    *target = *it->second;
  }
}

}  // namespace rave
