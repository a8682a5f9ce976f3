#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lidarflow/binary_io.hpp"
#include "lidarflow/error.hpp"
#include "lidarflow/network.hpp"
#include "lidarflow/optim.hpp"

namespace lidarflow {

/// Checkpoint file: 'LFW1', u32 count, then per tensor a u32 name length,
/// the name, u32 x4 dims and little-endian f32 values. Values are always
/// stored as f32, so a 64-bit model round-trips only to f32 precision.
struct NamedTensor {
  std::string name;
  Shape4 shape;
  std::vector<float> data;
};

inline io::Bytes encode_tensors(const std::vector<NamedTensor>& tensors) {
  io::Writer w;
  w.str("LFW1");
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.data.size() != t.shape.size()) throw ShapeError("checkpoint: " + t.name + " data does not match its shape");
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.str(t.name);
    for (int d : {t.shape.n, t.shape.c, t.shape.h, t.shape.w}) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data) w.f32(v);
  }
  return w.take();
}

inline std::vector<NamedTensor> decode_tensors(const io::Bytes& bytes, const std::string& what = "checkpoint") {
  io::Reader r(bytes, what);
  if (r.str(4) != "LFW1") throw FormatError(what + ": bad magic, expected LFW1");
  const auto count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.u32();
    t.name = r.str(len);
    std::uint32_t dims[4];
    for (auto& d : dims) d = r.u32();
    for (auto d : dims) {
      if (d > (1u << 24)) throw FormatError(what + ": implausible dimension in " + t.name);
    }
    t.shape = Shape4{static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
                     static_cast<int>(dims[3])};
    r.need(t.shape.size() * 4);
    t.data.resize(t.shape.size());
    for (auto& v : t.data) v = r.f32();
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError(what + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return out;
}

template <typename T>
NamedTensor named(const std::string& name, const Tensor<T>& t) {
  NamedTensor n{name, t.shape(), std::vector<float>(t.size())};
  for (std::size_t i = 0; i < t.size(); ++i) n.data[i] = static_cast<float>(t[i]);
  return n;
}

/// Parameters, plus Adam moments under "<name>.adam_m" / "<name>.adam_v" and
/// the step counter as the scalar tensor "adam.t" when `adam` is given.
template <typename T>
io::Bytes encode_checkpoint(const NetworkParams<T>& params, const std::vector<AdamState<T>>* adam = nullptr) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params.size(); ++i) out.push_back(named(params.names[i], params.values[i]));
  if (adam) {
    if (adam->size() != params.size()) throw ShapeError("checkpoint: optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.push_back(named(params.names[i] + ".adam_m", (*adam)[i].m));
      out.push_back(named(params.names[i] + ".adam_v", (*adam)[i].v));
    }
    const float t = adam->empty() ? 0.0f : static_cast<float>((*adam)[0].t);
    out.push_back(NamedTensor{"adam.t", Shape4{1, 1, 1, 1}, {t}});
  }
  return encode_tensors(out);
}

/// Restore parameters laid out by `plan`. Every plan tensor must be present
/// with its planned shape. Adam state is restored into `adam` when requested
/// and present; otherwise `adam` is reset to zero state.
template <typename T>
NetworkParams<T> decode_checkpoint(const io::Bytes& bytes, const NetworkPlan& plan,
                                   std::vector<AdamState<T>>* adam = nullptr, const std::string& what = "checkpoint") {
  const auto tensors = decode_tensors(bytes, what);
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  auto fetch = [&](const std::string& name, const Shape4& shape) -> const NamedTensor* {
    const auto it = by_name.find(name);
    if (it == by_name.end()) return nullptr;
    if (it->second->shape != shape) {
      throw FormatError(what + ": " + name + " has shape " + to_string(it->second->shape) + ", model expects " +
                        to_string(shape));
    }
    return it->second;
  };
  auto to_tensor = [](const NamedTensor& n) {
    Tensor<T> t(n.shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(n.data[i]);
    return t;
  };

  NetworkParams<T> params = zero_params<T>(plan);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* t = fetch(params.names[i], params.values[i].shape());
    if (!t) throw FormatError(what + ": missing tensor " + params.names[i]);
    params.values[i] = to_tensor(*t);
  }
  if (adam) {
    adam->clear();
    const auto step = by_name.find("adam.t");
    for (std::size_t i = 0; i < params.size(); ++i) {
      AdamState<T> s(params.values[i].shape());
      if (step != by_name.end()) {
        const auto* m = fetch(params.names[i] + ".adam_m", s.m.shape());
        const auto* v = fetch(params.names[i] + ".adam_v", s.v.shape());
        if (!m || !v) throw FormatError(what + ": missing optimizer state for " + params.names[i]);
        s.m = to_tensor(*m);
        s.v = to_tensor(*v);
        s.t = static_cast<std::int64_t>(step->second->data.at(0));
      }
      adam->push_back(std::move(s));
    }
  }
  return params;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const NetworkParams<T>& params,
                     const std::vector<AdamState<T>>* adam = nullptr) {
  io::write_file(path, encode_checkpoint(params, adam));
}

template <typename T>
NetworkParams<T> load_checkpoint(const std::filesystem::path& path, const NetworkPlan& plan,
                                 std::vector<AdamState<T>>* adam = nullptr) {
  return decode_checkpoint<T>(io::read_file(path), plan, adam, path.string());
}

}  // namespace lidarflow
