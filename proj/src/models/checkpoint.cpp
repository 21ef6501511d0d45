#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mtsc/errors.hpp"
#include "mtsc/models.hpp"

namespace mtsc {

namespace {

constexpr char kMagic[8] = {'M', 'T', 'S', 'C', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <class T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    uint<std::uint64_t>(s.size());
    out_ += s;
  }
  std::string& buffer() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& in, std::size_t end) : in_(in), end_(end) {}
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint is truncated at byte " + std::to_string(pos_));
  }
  template <class T>
  T uint() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= T(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string str() {
    auto n = uint<std::uint64_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& in_;
  std::size_t end_, pos_ = 0;
};

std::uint32_t checksum(const std::string& bytes, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n)));
}

}  // namespace

Checkpoint snapshot(const Model& model, nlohmann::json metadata) {
  Checkpoint c;
  c.metadata = std::move(metadata);
  auto add = [&](const std::vector<Parameter>& list, bool buffer) {
    for (const auto& p : list) {
      auto d = p.tensor.data();
      c.entries.push_back({p.name, buffer, p.tensor.shape(), {d.begin(), d.end()}});
    }
  };
  add(model.store().parameters(), false);
  add(model.store().buffers(), true);
  return c;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.uint<std::uint32_t>(kVersion);
  w.str(ckpt.metadata.dump());
  w.uint<std::uint64_t>(ckpt.entries.size());
  for (const auto& e : ckpt.entries) {
    w.str(e.name);
    w.uint<std::uint8_t>(e.buffer ? 1 : 0);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
    for (auto dim : e.shape) w.uint<std::uint64_t>(dim);
    w.uint<std::uint64_t>(e.values.size());
    for (double v : e.values) w.f64(v);
  }
  w.uint<std::uint32_t>(checksum(w.buffer(), w.buffer().size()));
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (std::size_t i = 0; i < 4; ++i) stored |= std::uint32_t(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
  if (stored != checksum(bytes, body)) throw CheckpointError("checkpoint checksum mismatch; the file is corrupted");

  Reader r(bytes, body);
  r.need(sizeof kMagic);
  for (std::size_t i = 0; i < sizeof kMagic; ++i) r.uint<std::uint8_t>();
  auto version = r.uint<std::uint32_t>();
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  try {
    c.metadata = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  auto n = r.uint<std::uint64_t>();
  for (std::uint64_t k = 0; k < n; ++k) {
    CheckpointEntry e;
    e.name = r.str();
    e.buffer = r.uint<std::uint8_t>() != 0;
    auto rank = r.uint<std::uint32_t>();
    for (std::uint32_t i = 0; i < rank; ++i) e.shape.push_back(r.uint<std::uint64_t>());
    auto count = r.uint<std::uint64_t>();
    if (count != shape_numel(e.shape)) throw CheckpointError("entry '" + e.name + "' has inconsistent size");
    r.need(count * 8);
    e.values.resize(count);
    for (auto& v : e.values) v = r.f64();
    c.entries.push_back(std::move(e));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last checkpoint entry");
  return c;
}

void restore(Model& model, const Checkpoint& ckpt) {
  std::size_t expected = model.store().parameters().size() + model.store().buffers().size();
  if (ckpt.entries.size() != expected)
    throw CheckpointError("checkpoint holds " + std::to_string(ckpt.entries.size()) + " tensors, model expects " +
                          std::to_string(expected));
  std::size_t k = 0;
  for (const auto* list : {&model.store().parameters(), &model.store().buffers()})
    for (const auto& p : *list) {
      const auto& e = ckpt.entries[k++];
      if (e.name != p.name || e.shape != p.tensor.shape())
        throw CheckpointError("checkpoint entry '" + e.name + "' " + shape_str(e.shape) + " does not match model '" +
                              p.name + "' " + shape_str(p.tensor.shape()));
      Tensor t = p.tensor;
      std::copy(e.values.begin(), e.values.end(), t.mutable_data().begin());
    }
}

void save_checkpoint(const std::string& path, const Model& model, nlohmann::json metadata) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
  std::string bytes = encode_checkpoint(snapshot(model, std::move(metadata)));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

std::pair<Model, nlohmann::json> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  Checkpoint c = decode_checkpoint(buf.str());
  ModelSpec spec;
  std::uint64_t seed = 0;
  try {
    spec = ModelSpec::from_json(c.metadata.at("spec"));
    seed = c.metadata.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata lacks a model spec: ") + e.what());
  }
  Model m = build_model(spec, seed);
  restore(m, c);
  return {std::move(m), std::move(c.metadata)};
}

}  // namespace mtsc
