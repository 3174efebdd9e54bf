#include "peftlab/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace peftlab {

namespace {

constexpr const char* kMagic = "peftlab-checkpoint v1";

void write_f64_le(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(bytes, 8);
}

double read_f64_le(std::istream& is) {
  char bytes[8];
  is.read(bytes, 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  }
  return std::bit_cast<double>(bits);
}

std::string expect_line(std::istream& is, const std::string& what) {
  std::string line;
  if (!std::getline(is, line)) throw Error("checkpoint truncated while reading " + what);
  return line;
}

std::uint64_t parse_field_u64(const std::string& line, const std::string& key) {
  if (line.rfind(key + " ", 0) != 0) throw Error("checkpoint header missing \"" + key + "\"");
  return std::stoull(line.substr(key.size() + 1));
}

}  // namespace

const Tensor* CheckpointData::find(const std::string& name) const {
  for (const NamedArray& a : arrays) {
    if (a.name == name) return &a.tensor;
  }
  return nullptr;
}

CheckpointData snapshot_model(Model& model, std::uint64_t seed, std::uint64_t step) {
  CheckpointData ckpt;
  ckpt.signature = model.signature();
  ckpt.seed = seed;
  ckpt.step = step;
  for (const NamedTensor& nt : model.named_tensors()) {
    ckpt.arrays.push_back({nt.name, *nt.tensor});
  }
  return ckpt;
}

void write_checkpoint(const CheckpointData& ckpt, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open checkpoint for writing: " + path.string());
  os << kMagic << "\n";
  os << "signature " << ckpt.signature << "\n";
  os << "seed " << ckpt.seed << "\n";
  os << "step " << ckpt.step << "\n";
  os << "arrays " << ckpt.arrays.size() << "\n";
  for (const NamedArray& a : ckpt.arrays) {
    os << "array " << a.name << " " << a.tensor.ndim();
    for (std::size_t e : a.tensor.shape()) os << " " << e;
    os << "\n";
    for (double v : a.tensor.data()) write_f64_le(os, v);
    os << "\n";
  }
  if (!os) throw Error("checkpoint write failed: " + path.string());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path.string());
  if (expect_line(is, "magic") != kMagic) throw Error("not a checkpoint file: " + path.string());
  CheckpointData ckpt;
  const std::string sig_line = expect_line(is, "signature");
  if (sig_line.rfind("signature ", 0) != 0) throw Error("checkpoint header missing signature");
  ckpt.signature = sig_line.substr(10);
  ckpt.seed = parse_field_u64(expect_line(is, "seed"), "seed");
  ckpt.step = parse_field_u64(expect_line(is, "step"), "step");
  const std::uint64_t count = parse_field_u64(expect_line(is, "arrays"), "arrays");
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string header = expect_line(is, "array header");
    std::istringstream hs(header);
    std::string tag, name;
    std::size_t ndim = 0;
    hs >> tag >> name >> ndim;
    if (tag != "array" || !hs) throw Error("malformed array header: " + header);
    std::vector<std::size_t> shape(ndim);
    for (auto& e : shape) hs >> e;
    if (!hs) throw Error("malformed array shape: " + header);
    Tensor t(shape);
    for (std::size_t j = 0; j < t.numel(); ++j) t[j] = read_f64_le(is);
    if (!is) throw Error("checkpoint truncated in array " + name);
    if (is.get() != '\n') throw Error("missing array terminator after " + name);
    ckpt.arrays.push_back({std::move(name), std::move(t)});
  }
  return ckpt;
}

void save_checkpoint(Model& model, const std::filesystem::path& path, std::uint64_t seed,
                     std::uint64_t step) {
  write_checkpoint(snapshot_model(model, seed, step), path);
}

void load_checkpoint(Model& model, const CheckpointData& ckpt) {
  const std::string sig = model.signature();
  if (ckpt.signature != sig) {
    throw Error("checkpoint signature mismatch:\n  archive: " + ckpt.signature + "\n  model:   " + sig);
  }
  auto named = model.named_tensors();
  if (named.size() != ckpt.arrays.size()) {
    throw Error("checkpoint array count " + std::to_string(ckpt.arrays.size()) +
                " does not match model tensor count " + std::to_string(named.size()));
  }
  for (NamedTensor& nt : named) {
    const Tensor* src = ckpt.find(nt.name);
    if (!src) throw Error("checkpoint missing array " + nt.name);
    if (src->shape() != nt.tensor->shape()) {
      throw Error("checkpoint array " + nt.name + " shape " + shape_str(src->shape()) +
                  " does not match model shape " + shape_str(nt.tensor->shape()));
    }
    const bool rq = nt.tensor->requires_grad;
    *nt.tensor = *src;
    nt.tensor->requires_grad = rq;
    nt.tensor->clear_grad();
  }
}

void load_checkpoint_file(Model& model, const std::filesystem::path& path) {
  load_checkpoint(model, read_checkpoint(path));
}

}  // namespace peftlab
