#pragma once

// Model checkpoints:
//   "OTFM" | u32 LE version | u64 LE header length | JSON header | f32 LE payload
// The payload holds every layer's weights, row-major, in layer order.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "otfuse/error.hpp"
#include "otfuse/model.hpp"

namespace otfuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, bad_header, truncated, size_mismatch };
  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  NetworkModel model;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline nlohmann::json layer_json(const LayerSpec& s) {
  return {{"kind", to_string(s.kind)},
          {"in_width", s.in_width},
          {"out_width", s.out_width},
          {"kernel", {s.kernel_h, s.kernel_w}},
          {"activation", to_string(s.activation)},
          {"pool", s.pool}};
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  LayerSpec s;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "dense")
    s.kind = LayerKind::dense;
  else if (kind == "conv2d")
    s.kind = LayerKind::conv2d;
  else
    throw CheckpointError(CheckpointError::Kind::bad_header, "bad header: unknown layer kind '" + kind + "'");
  s.in_width = j.at("in_width").get<Index>();
  s.out_width = j.at("out_width").get<Index>();
  s.kernel_h = j.at("kernel").at(0).get<Index>();
  s.kernel_w = j.at("kernel").at(1).get<Index>();
  const std::string act = j.at("activation").get<std::string>();
  if (act == "relu")
    s.activation = Activation::relu;
  else if (act == "none")
    s.activation = Activation::none;
  else
    throw CheckpointError(CheckpointError::Kind::bad_header, "bad header: unknown activation '" + act + "'");
  s.pool = j.at("pool").get<bool>();
  return s;
}

}  // namespace detail

/// The exact bytes `save_checkpoint` writes.
inline std::string checkpoint_bytes(const NetworkModel& model, const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json header;
  header["dtype"] = "f32";
  const FeatureShape in = model.input_shape();
  header["input_shape"] = {in.channels, in.height, in.width};
  header["layers"] = nlohmann::json::array();
  for (const auto& s : model.layers()) header["layers"].push_back(detail::layer_json(s));
  header["payload_floats"] = count_params(model);
  header["metadata"] = metadata;
  const std::string text = header.dump();

  std::string out = "OTFM";
  detail::put_le(out, kCheckpointVersion, 4);
  detail::put_le(out, text.size(), 8);
  out += text;
  out.reserve(out.size() + 4 * static_cast<std::size_t>(count_params(model)));
  for (const auto& w : model.weights()) {
    for (Index i = 0; i < w.size(); ++i) {
      const float f = static_cast<float>(w.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_le(out, bits, 4);
    }
  }
  return out;
}

inline void save_checkpoint(const NetworkModel& model, const std::string& path,
                            const nlohmann::json& metadata = nlohmann::json::object()) {
  const std::string bytes = checkpoint_bytes(model, metadata);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError(CheckpointError::Kind::io, "write failed for " + path);
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  using K = CheckpointError::Kind;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || std::memcmp(p, "OTFM", 4) != 0) throw CheckpointError(K::bad_magic, origin + ": bad magic");
  if (bytes.size() < 16) throw CheckpointError(K::truncated, origin + ": truncated header");
  const auto version = static_cast<std::uint32_t>(detail::get_le(p + 4, 4));
  if (version != kCheckpointVersion)
    throw CheckpointError(K::version_mismatch, origin + ": version mismatch (file " + std::to_string(version) +
                                                   ", supported " + std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t header_len = detail::get_le(p + 8, 8);
  if (header_len > bytes.size() - 16) throw CheckpointError(K::truncated, origin + ": truncated header");

  nlohmann::json header;
  std::vector<LayerSpec> layers;
  FeatureShape input;
  std::uint64_t claimed = 0;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    if (header.at("dtype").get<std::string>() != "f32")
      throw CheckpointError(K::bad_header, origin + ": bad header: unsupported dtype");
    const auto& shape = header.at("input_shape");
    input = {shape.at(0).get<Index>(), shape.at(1).get<Index>(), shape.at(2).get<Index>()};
    for (const auto& l : header.at("layers")) layers.push_back(detail::layer_from_json(l));
    claimed = header.at("payload_floats").get<std::uint64_t>();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(K::bad_header, origin + ": bad header: " + e.what());
  }

  NetworkModel arch = [&] {
    try {
      return NetworkModel::zeros(input, layers);
    } catch (const Error& e) {
      throw CheckpointError(K::bad_header, origin + ": bad header: " + e.what());
    }
  }();
  const auto expected = static_cast<std::uint64_t>(count_params(arch));
  if (claimed != expected)
    throw CheckpointError(K::size_mismatch, origin + ": payload size mismatch (header claims " +
                                                std::to_string(claimed) + " floats, layers need " +
                                                std::to_string(expected) + ")");
  const std::uint64_t available = bytes.size() - 16 - header_len;
  if (available < 4 * expected)
    throw CheckpointError(K::truncated, origin + ": truncated payload (" + std::to_string(available) + " of " +
                                            std::to_string(4 * expected) + " bytes)");
  if (available > 4 * expected)
    throw CheckpointError(K::size_mismatch, origin + ": payload size mismatch (" +
                                                std::to_string(available - 4 * expected) + " trailing bytes)");

  const unsigned char* q = p + 16 + header_len;
  std::vector<Matrix> w;
  for (Index l = 0; l < arch.depth(); ++l) {
    Matrix m(arch.weight(l).rows(), arch.weight(l).cols());
    for (Index i = 0; i < m.size(); ++i, q += 4) {
      const auto bits = static_cast<std::uint32_t>(detail::get_le(q, 4));
      float f;
      std::memcpy(&f, &bits, 4);
      m.data()[i] = f;
    }
    w.push_back(std::move(m));
  }
  try {
    return {arch.with_weights(std::move(w)), header.value("metadata", nlohmann::json::object())};
  } catch (const Error& e) {
    throw CheckpointError(K::bad_header, origin + ": " + e.what());
  }
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path);
}

inline NetworkModel load_model(const std::string& path) { return load_checkpoint(path).model; }

}  // namespace otfuse
