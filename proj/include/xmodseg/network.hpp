#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodseg/ops.hpp"
#include "xmodseg/rng.hpp"

// Networks are flat layer-spec lists interpreted by forward(). Skip
// connections use an explicit value stack (Push / ConcatPop / AddPop), which
// is enough to express both U-Nets and residual encoder-decoders while
// keeping the checkpoint format a plain list.

namespace xmodseg::nn {

using nlohmann::json;

enum class Act { ReLU, LeakyReLU, Tanh, Sigmoid };

struct Conv2dSpec {
  int in_ch, out_ch, k, stride, pad;
};
struct ConvT2dSpec {
  int in_ch, out_ch, k, stride, pad, out_pad;
};
struct InstanceNormSpec {
  int ch;
};
struct ActSpec {
  Act kind;
};
struct PushSpec {};       // push current activation onto the skip stack
struct ConcatPopSpec {};  // pop and channel-concat (popped first)
struct AddPopSpec {};     // pop and add (residual)

using LayerSpec = std::variant<Conv2dSpec, ConvT2dSpec, InstanceNormSpec,
                               ActSpec, PushSpec, ConcatPopSpec, AddPopSpec>;

namespace detail {
template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;
}  // namespace detail

/// Parameter tensor shapes implied by a spec list, in forward order.
inline std::vector<Shape> param_shapes(const std::vector<LayerSpec>& specs) {
  std::vector<Shape> shapes;
  for (const auto& spec : specs) {
    std::visit(detail::overloaded{
                   [&](const Conv2dSpec& s) {
                     shapes.push_back({s.out_ch, s.in_ch, s.k, s.k});
                     shapes.push_back({s.out_ch});
                   },
                   [&](const ConvT2dSpec& s) {
                     shapes.push_back({s.in_ch, s.out_ch, s.k, s.k});
                     shapes.push_back({s.out_ch});
                   },
                   [&](const InstanceNormSpec& s) {
                     shapes.push_back({s.ch});
                     shapes.push_back({s.ch});
                   },
                   [](const auto&) {},
               },
               spec);
  }
  return shapes;
}

inline std::size_t param_count(const std::vector<LayerSpec>& specs) {
  std::size_t n = 0;
  for (const auto& s : param_shapes(specs)) n += shape_numel(s);
  return n;
}

template <typename T>
struct Network {
  std::vector<LayerSpec> specs;
  std::vector<Tensor<T>> params;
  json meta = json::object();

  /// frozen=true injects parameters as constants, so no gradient reaches
  /// them (used when a loss must treat this network as fixed).
  Tensor<T> forward(const Tensor<T>& input, bool frozen = false) const {
    std::size_t pi = 0;
    std::vector<Tensor<T>> stack;
    Tensor<T> h = input;
    auto param = [&](std::size_t k) {
      return frozen ? params[k].detach() : params[k];
    };
    for (const auto& spec : specs) {
      std::visit(
          detail::overloaded{
              [&](const Conv2dSpec& s) {
                h = conv2d(h, param(pi), param(pi + 1), s.stride, s.pad);
                pi += 2;
              },
              [&](const ConvT2dSpec& s) {
                h = conv_transpose2d(h, param(pi), param(pi + 1), s.stride,
                                     s.pad, s.out_pad);
                pi += 2;
              },
              [&](const InstanceNormSpec&) {
                h = instance_norm(h, param(pi), param(pi + 1));
                pi += 2;
              },
              [&](const ActSpec& s) {
                switch (s.kind) {
                  case Act::ReLU: h = relu(h); break;
                  case Act::LeakyReLU: h = leaky_relu(h, T(0.2)); break;
                  case Act::Tanh: h = tanh_op(h); break;
                  case Act::Sigmoid: h = sigmoid(h); break;
                }
              },
              [&](const PushSpec&) { stack.push_back(h); },
              [&](const ConcatPopSpec&) {
                require(!stack.empty(), "forward: ConcatPop on empty stack");
                h = concat_channels(stack.back(), h);
                stack.pop_back();
              },
              [&](const AddPopSpec&) {
                require(!stack.empty(), "forward: AddPop on empty stack");
                h = add(stack.back(), h);
                stack.pop_back();
              },
          },
          spec);
    }
    require(stack.empty(), "forward: unconsumed skip activations");
    return h;
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
  }
};

/// He-normal init for conv weights, zeros for biases, (1, 0) for norm affine.
template <typename T>
Network<T> build_network(std::vector<LayerSpec> specs, std::uint64_t seed) {
  Network<T> net;
  net.specs = std::move(specs);
  Rng rng(derive_seed(seed, "net-init"));
  std::size_t cursor = 0;
  for (const auto& spec : net.specs) {
    std::visit(detail::overloaded{
                   [&](const Conv2dSpec& s) {
                     const double std = std::sqrt(2.0 / (s.in_ch * s.k * s.k));
                     std::vector<T> w(static_cast<std::size_t>(s.out_ch) *
                                      s.in_ch * s.k * s.k);
                     for (auto& v : w) v = static_cast<T>(rng.normal(0.0, std));
                     net.params.push_back(Tensor<T>::leaf(
                         {s.out_ch, s.in_ch, s.k, s.k}, std::move(w), true));
                     net.params.push_back(Tensor<T>::zeros({s.out_ch}, true));
                     cursor += 2;
                   },
                   [&](const ConvT2dSpec& s) {
                     const double std = std::sqrt(2.0 / (s.in_ch * s.k * s.k));
                     std::vector<T> w(static_cast<std::size_t>(s.in_ch) *
                                      s.out_ch * s.k * s.k);
                     for (auto& v : w) v = static_cast<T>(rng.normal(0.0, std));
                     net.params.push_back(Tensor<T>::leaf(
                         {s.in_ch, s.out_ch, s.k, s.k}, std::move(w), true));
                     net.params.push_back(Tensor<T>::zeros({s.out_ch}, true));
                     cursor += 2;
                   },
                   [&](const InstanceNormSpec& s) {
                     net.params.push_back(Tensor<T>::leaf(
                         {s.ch}, std::vector<T>(s.ch, T(1)), true));
                     net.params.push_back(Tensor<T>::zeros({s.ch}, true));
                     cursor += 2;
                   },
                   [](const auto&) {},
               },
               spec);
  }
  return net;
}

// ---- spec <-> json ---------------------------------------------------------

inline json spec_to_json(const LayerSpec& spec) {
  return std::visit(
      detail::overloaded{
          [](const Conv2dSpec& s) -> json {
            return {{"type", "conv"}, {"in", s.in_ch}, {"out", s.out_ch},
                    {"k", s.k},       {"s", s.stride}, {"p", s.pad}};
          },
          [](const ConvT2dSpec& s) -> json {
            return {{"type", "convT"}, {"in", s.in_ch}, {"out", s.out_ch},
                    {"k", s.k},        {"s", s.stride}, {"p", s.pad},
                    {"op", s.out_pad}};
          },
          [](const InstanceNormSpec& s) -> json {
            return {{"type", "inorm"}, {"ch", s.ch}};
          },
          [](const ActSpec& s) -> json {
            const char* k = s.kind == Act::ReLU        ? "relu"
                            : s.kind == Act::LeakyReLU ? "lrelu"
                            : s.kind == Act::Tanh      ? "tanh"
                                                       : "sigmoid";
            return {{"type", "act"}, {"kind", k}};
          },
          [](const PushSpec&) -> json { return {{"type", "push"}}; },
          [](const ConcatPopSpec&) -> json { return {{"type", "concat_pop"}}; },
          [](const AddPopSpec&) -> json { return {{"type", "add_pop"}}; },
      },
      spec);
}

inline LayerSpec spec_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "conv")
    return Conv2dSpec{j.at("in"), j.at("out"), j.at("k"), j.at("s"), j.at("p")};
  if (type == "convT")
    return ConvT2dSpec{j.at("in"), j.at("out"), j.at("k"),
                       j.at("s"),  j.at("p"),   j.at("op")};
  if (type == "inorm") return InstanceNormSpec{j.at("ch")};
  if (type == "act") {
    const std::string k = j.at("kind").get<std::string>();
    if (k == "relu") return ActSpec{Act::ReLU};
    if (k == "lrelu") return ActSpec{Act::LeakyReLU};
    if (k == "tanh") return ActSpec{Act::Tanh};
    if (k == "sigmoid") return ActSpec{Act::Sigmoid};
    throw FormatError("unknown activation kind: " + k);
  }
  if (type == "push") return PushSpec{};
  if (type == "concat_pop") return ConcatPopSpec{};
  if (type == "add_pop") return AddPopSpec{};
  throw FormatError("unknown layer type: " + type);
}

// ---- checkpoint container ----------------------------------------------------
//
// Layout: 8-byte magic, u32 container version, u64 JSON header length, the
// header (format_version, layer specs, parameter shapes, free-form meta),
// then every parameter as raw little-endian float32 in forward order.

inline constexpr char kCkptMagic[8] = {'X', 'M', 'S', 'E', 'G', 'N', 'E', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void save_network(const Network<T>& net, const std::string& path) {
  const auto expect = param_shapes(net.specs);
  require(expect.size() == net.params.size(),
          "save_network: spec/param list size mismatch");
  json header = {{"format_version", kCkptVersion},
                 {"layers", json::array()},
                 {"param_shapes", json::array()},
                 {"meta", net.meta}};
  for (const auto& s : net.specs) header["layers"].push_back(spec_to_json(s));
  for (const auto& p : net.params) header["param_shapes"].push_back(p.shape());

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  const std::string hdr = header.dump();
  const std::uint64_t hlen = hdr.size();
  out.write(kCkptMagic, 8);
  out.write(reinterpret_cast<const char*>(&kCkptVersion), 4);
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(hdr.data(), static_cast<std::streamsize>(hlen));
  for (const auto& p : net.params) {
    for (const T v : p.values()) {
      const float f = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
  if (!out.good()) throw IoError("checkpoint write failed: " + path);
}

template <typename T>
Network<T> load_network(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in.good() || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw FormatError("not a checkpoint file: " + path);
  if (version != kCkptVersion)
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version) + ": " + path);
  std::string hdr(hlen, '\0');
  in.read(hdr.data(), static_cast<std::streamsize>(hlen));
  if (!in.good()) throw FormatError("truncated checkpoint header: " + path);
  json header;
  try {
    header = json::parse(hdr);
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint header: " + std::string(e.what()));
  }

  Network<T> net;
  for (const auto& j : header.at("layers")) net.specs.push_back(spec_from_json(j));
  net.meta = header.value("meta", json::object());
  const auto expect = param_shapes(net.specs);
  const auto& shapes = header.at("param_shapes");
  require(shapes.size() == expect.size(), "checkpoint param shape list mismatch");
  for (std::size_t i = 0; i < expect.size(); ++i) {
    const Shape s = shapes[i].get<Shape>();
    if (s != expect[i])
      throw FormatError("checkpoint param " + std::to_string(i) +
                        " shape mismatch: " + path);
    std::vector<float> buf(shape_numel(s));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * 4));
    if (!in.good()) throw FormatError("truncated checkpoint data: " + path);
    std::vector<T> vals(buf.begin(), buf.end());
    net.params.push_back(Tensor<T>::leaf(s, std::move(vals), true));
  }
  return net;
}

/// Rebuilds a network with a different scalar type (e.g. float -> double for
/// gradient checks).
template <typename To, typename From>
Network<To> cast_network(const Network<From>& src) {
  Network<To> dst;
  dst.specs = src.specs;
  dst.meta = src.meta;
  for (const auto& p : src.params) {
    std::vector<To> vals(p.values().begin(), p.values().end());
    dst.params.push_back(Tensor<To>::leaf(p.shape(), std::move(vals), true));
  }
  return dst;
}

}  // namespace xmodseg::nn
