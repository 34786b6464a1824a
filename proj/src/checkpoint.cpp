// SPDX-License-Identifier: Apache-2.0

#include "lorkd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

namespace lorkd {

namespace {

constexpr char kMagic[4] = {'L', 'R', 'K', 'D'};
constexpr std::size_t kHeaderSize = 16;

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::string_view in, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

Json conv_description(const EksConvLayer<float>& c) {
  Json ranks = Json::array();
  for (const auto& e : c.experts) ranks.push_back(e.rank);
  const ConvGeometry& g = c.geometry;
  return Json{{"in", g.in_channels}, {"out", g.out_channels}, {"kernel", g.kernel}, {"stride", g.stride},
              {"padding", g.padding}, {"groups", g.groups},   {"bias", c.has_bias()}, {"ranks", ranks}};
}

LinearHead<float> head_skeleton(const Json& j) {
  const auto out = j.at(0).get<std::size_t>(), in = j.at(1).get<std::size_t>();
  return {Tensor<float>({out, in}), Tensor<float>({out})};
}

}  // namespace

Json network_description(const Network<float>& net) {
  Json layers = Json::array();
  for (const auto& l : net.layers) layers.push_back({{"kind", to_string(l.kind)}, {"conv", l.conv}, {"skip_from", l.skip_from}});
  Json convs = Json::array();
  for (const auto& c : net.convs) convs.push_back(conv_description(c));
  Json heads = Json::array();
  for (const auto& h : net.heads) heads.push_back({h.weight.dim(0), h.weight.dim(1)});
  return Json{{"mode", to_string(net.mode)},
              {"role", to_string(net.role)},
              {"input_channels", net.input_channels},
              {"class_counts", net.class_counts},
              {"extracted_task", net.extracted_task},
              {"layers", layers},
              {"convs", convs},
              {"heads", heads},
              {"projection", net.projection.empty() ? Json(nullptr)
                                                    : Json{net.projection.weight.dim(0), net.projection.weight.dim(1)}}};
}

Network<float> network_skeleton(const Json& d) {
  try {
    Network<float> net;
    net.mode = parse_net_mode(d.at("mode").get<std::string>());
    net.role = parse_net_role(d.at("role").get<std::string>());
    net.input_channels = d.at("input_channels").get<std::size_t>();
    net.class_counts = d.at("class_counts").get<std::vector<std::size_t>>();
    net.extracted_task = d.at("extracted_task").get<std::size_t>();
    for (const auto& l : d.at("layers"))
      net.layers.push_back({parse_layer_kind(l.at("kind").get<std::string>()), l.at("conv").get<std::size_t>(),
                            l.at("skip_from").get<std::size_t>()});
    for (const auto& c : d.at("convs")) {
      ConvGeometry g{c.at("in").get<std::size_t>(),     c.at("out").get<std::size_t>(),
                     c.at("kernel").get<std::size_t>(), c.at("stride").get<std::size_t>(),
                     c.at("padding").get<std::size_t>(), c.at("groups").get<std::size_t>()};
      g.validate();
      EksConvLayer<float> layer{g, Tensor<float>(g.weight_shape()),
                                c.at("bias").get<bool>() ? Tensor<float>({g.out_channels}) : Tensor<float>(), {}};
      for (const auto& r : c.at("ranks")) {
        const auto rank = r.get<std::size_t>();
        layer.experts.push_back(
            {Tensor<float>(lowrank_b_shape(g, rank)), Tensor<float>(lowrank_a_shape(g, rank)), rank, g});
      }
      net.convs.push_back(std::move(layer));
    }
    for (const auto& h : d.at("heads")) net.heads.push_back(head_skeleton(h));
    if (!d.at("projection").is_null()) net.projection = head_skeleton(d.at("projection"));
    net.validate();
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("checkpoint metadata describes no valid network: {}", e.what()));
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(fmt::format("checkpoint metadata describes no valid network: {}", e.what()));
  }
}

std::string serialize_checkpoint(const Network<float>& net, const Json& extra) {
  Json tensors = Json::array();
  std::string payload;
  net.for_each_param([&](const std::string& name, const Tensor<float>& t, ParamKind) {
    tensors.push_back({{"name", name}, {"dtype", "f32"}, {"shape", t.shape()}, {"byte_offset", payload.size()}});
    for (float v : t.data()) put_le(payload, std::bit_cast<std::uint32_t>(v));
  });
  Json meta{{"network", network_description(net)}, {"tensors", tensors}};
  if (!extra.empty()) meta["extra"] = extra;
  const std::string meta_text = meta.dump();
  std::string out(kMagic, 4);
  put_le(out, kCheckpointVersion);
  put_le(out, static_cast<std::uint64_t>(meta_text.size()));
  out += meta_text;
  out += payload;
  return out;
}

Network<float> deserialize_checkpoint(std::string_view bytes, Json* extra) {
  if (bytes.size() < kHeaderSize) {
    throw FormatError(fmt::format("checkpoint header truncated at byte {} (need {} bytes)", bytes.size(), kHeaderSize));
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad checkpoint magic at byte 0 (expected \"LRKD\")");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw FormatError(fmt::format("unsupported checkpoint version {} at byte 4 (expected {})", version, kCheckpointVersion));
  }
  const auto meta_len = get_le<std::uint64_t>(bytes, 8);
  if (meta_len > bytes.size() - kHeaderSize) {
    throw FormatError(fmt::format("metadata length {} at byte 8 runs past the end of the {}-byte file", meta_len,
                                  bytes.size()));
  }
  Json meta;
  try {
    meta = Json::parse(bytes.substr(kHeaderSize, meta_len));
  } catch (const nlohmann::json::parse_error& e) {
    // parse_error::byte is 1-based
    const std::size_t at = kHeaderSize + (e.byte > 0 ? e.byte - 1 : 0);
    throw FormatError(fmt::format("malformed metadata at byte {}: {}", at, e.what()));
  }
  if (!meta.contains("network") || !meta.contains("tensors") || !meta["tensors"].is_array()) {
    throw FormatError(fmt::format("metadata at byte {} lacks 'network' / 'tensors'", kHeaderSize));
  }
  Network<float> net = network_skeleton(meta["network"]);

  const std::size_t payload_start = kHeaderSize + meta_len;
  const std::size_t payload_size = bytes.size() - payload_start;
  struct Entry {
    Shape shape;
    std::size_t offset;
  };
  std::map<std::string, Entry> table;
  std::size_t expected = 0;
  for (const auto& t : meta["tensors"]) {
    std::string name;
    Entry e;
    try {
      name = t.at("name").get<std::string>();
      if (t.at("dtype").get<std::string>() != "f32") {
        throw FormatError(fmt::format("tensor '{}' has unsupported dtype {}", name, t.at("dtype").dump()));
      }
      e.shape = t.at("shape").get<Shape>();
      e.offset = t.at("byte_offset").get<std::size_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(fmt::format("bad tensor entry in metadata: {}", ex.what()));
    }
    if (e.offset != expected) {
      throw FormatError(fmt::format("tensor '{}' byte_offset {} (file byte {}) is not the expected {}", name, e.offset,
                                    payload_start + e.offset, expected));
    }
    const std::size_t nbytes = shape_size(e.shape) * sizeof(float);
    if (e.offset + nbytes > payload_size) {
      throw FormatError(fmt::format("payload truncated: tensor '{}' needs file bytes [{}, {}) but the file ends at {}",
                                    name, payload_start + e.offset, payload_start + e.offset + nbytes, bytes.size()));
    }
    if (!table.emplace(name, e).second) throw FormatError(fmt::format("duplicate tensor '{}'", name));
    expected += nbytes;
  }
  if (expected != payload_size) {
    throw FormatError(fmt::format("{} unexpected trailing bytes after byte {}", payload_size - expected,
                                  payload_start + expected));
  }

  std::size_t used = 0;
  net.for_each_param([&](const std::string& name, Tensor<float>& t, ParamKind) {
    auto it = table.find(name);
    if (it == table.end()) throw FormatError(fmt::format("checkpoint is missing tensor '{}'", name));
    if (it->second.shape != t.shape()) {
      throw FormatError(fmt::format("tensor '{}' has shape {}, network expects {}", name,
                                    shape_string(it->second.shape), shape_string(t.shape())));
    }
    const std::size_t pos = payload_start + it->second.offset;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos + 4 * i));
    ++used;
  });
  if (used != table.size()) throw FormatError("checkpoint holds tensors the network does not use");
  if (extra != nullptr) *extra = meta.contains("extra") ? meta["extra"] : Json::object();
  return net;
}

void save_checkpoint(const Network<float>& net, const std::string& path, const Json& extra) {
  write_text_file(path, serialize_checkpoint(net, extra));
}

Network<float> load_checkpoint(const std::string& path, Json* extra) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("cannot open checkpoint '{}'", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), extra);
}

}  // namespace lorkd
