#include "mvc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "mvc/errors.hpp"

namespace mvc {

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}

  std::string bytes(std::size_t n) {
    if (pos_ + n > data_.size()) throw DataError("truncated checkpoint file: " + origin_);
    std::string out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint16_t u16() {
    const std::string b = bytes(2);
    return static_cast<std::uint16_t>(static_cast<unsigned char>(b[0]) |
                                      (static_cast<unsigned char>(b[1]) << 8));
  }
  std::uint32_t u32() {
    const std::string b = bytes(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  double f64() {
    const std::string b = bytes(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return std::bit_cast<double>(v);
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<const Parameter*>& params,
                     const std::string& extra_metadata_json) {
  nlohmann::ordered_json meta;
  meta["format"] = "MVCL";
  meta["parameters"] = nlohmann::ordered_json::array();
  for (const Parameter* p : params) {
    nlohmann::ordered_json entry;
    entry["name"] = p->name();
    entry["shape"] = p->raw_tensor().shape;
    entry["bounded"] = p->bounded();
    if (p->bounded()) entry["lower_bound"] = p->lower_bound();
    meta["parameters"].push_back(entry);
  }
  if (!extra_metadata_json.empty()) {
    meta["extra"] = nlohmann::ordered_json::parse(extra_metadata_json);
  }
  const std::string meta_str = meta.dump();

  std::string out;
  out += "MVCL";
  put_u16(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(meta_str.size()));
  out += meta_str;
  for (const Parameter* p : params) {
    for (double v : p->raw_tensor().data) put_f64(out, v);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open checkpoint for writing: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("failed writing checkpoint: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path.string());
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), path.string());

  if (r.bytes(4) != "MVCL") throw DataError("bad checkpoint magic in " + path.string());
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t meta_len = r.u32();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint metadata in " + path.string() + ": " + e.what());
  }

  LoadedCheckpoint out;
  if (meta.contains("extra")) out.extra_metadata_json = meta["extra"].dump();
  for (const auto& entry : meta.at("parameters")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    Tensor t(shape);
    for (auto& v : t.data) v = r.f64();
    out.order.push_back(name);
    out.raw_tensors.emplace(name, std::move(t));
  }
  if (!r.done()) throw DataError("trailing bytes in checkpoint " + path.string());
  return out;
}

void restore_parameters(const LoadedCheckpoint& ckpt, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    auto it = ckpt.raw_tensors.find(p->name());
    if (it == ckpt.raw_tensors.end()) {
      throw DataError("checkpoint is missing parameter '" + p->name() + "'");
    }
    if (!same_shape(it->second.shape, p->raw_tensor().shape)) {
      throw DataError("checkpoint parameter '" + p->name() + "' has shape " +
                      shape_to_string(it->second.shape) + ", expected " +
                      shape_to_string(p->raw_tensor().shape));
    }
    p->raw_tensor().data = it->second.data;
  }
}

}  // namespace mvc
