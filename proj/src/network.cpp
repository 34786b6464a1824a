// SPDX-License-Identifier: Apache-2.0

#include "lorkd/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "lorkd/rng.hpp"

namespace lorkd {

std::string to_string(NetMode mode) { return mode == NetMode::cls ? "cls" : "seg"; }

std::string to_string(NetRole role) {
  switch (role) {
    case NetRole::student: return "student";
    case NetRole::teacher: return "teacher";
    case NetRole::extracted: return "extracted";
  }
  return "student";
}

NetMode parse_net_mode(const std::string& s) {
  if (s == "cls") return NetMode::cls;
  if (s == "seg") return NetMode::seg;
  throw ValueError(fmt::format("unknown mode '{}' (expected cls or seg)", s));
}

NetRole parse_net_role(const std::string& s) {
  if (s == "student") return NetRole::student;
  if (s == "teacher") return NetRole::teacher;
  if (s == "extracted") return NetRole::extracted;
  throw ValueError(fmt::format("unknown network role '{}'", s));
}

namespace {
constexpr const char* kLayerNames[] = {"eks_conv", "plain_conv", "relu", "upsample",
                                       "concat", "global_avg_pool", "sigmoid"};
}

std::string to_string(LayerKind kind) { return kLayerNames[static_cast<int>(kind)]; }

LayerKind parse_layer_kind(const std::string& s) {
  for (int i = 0; i < 7; ++i)
    if (s == kLayerNames[i]) return static_cast<LayerKind>(i);
  throw ValueError(fmt::format("unknown layer kind '{}'", s));
}

template <typename T>
std::size_t Network<T>::expert_rank(std::size_t task) const {
  for (const auto& c : convs)
    if (!c.experts.empty()) return c.experts.at(task).rank;
  return 0;
}

template <typename T>
bool Network<T>::has_experts() const {
  return std::any_of(convs.begin(), convs.end(), [](const auto& c) { return !c.experts.empty(); });
}

template <typename T>
std::size_t Network<T>::feature_width() const {
  if (mode != NetMode::cls) throw ValueError("feature_width is defined for classification networks");
  return convs.back().geometry.out_channels;
}

template <typename T>
std::size_t Network<T>::class_offset(std::size_t task) const {
  if (task >= class_counts.size()) throw ValueError(fmt::format("task {} out of range", task));
  return std::accumulate(class_counts.begin(), class_counts.begin() + static_cast<std::ptrdiff_t>(task),
                         std::size_t{0});
}

template <typename T>
void Network<T>::for_each_param(const std::function<void(const std::string&, Tensor<T>&, ParamKind)>& fn) {
  for (std::size_t i = 0; i < convs.size(); ++i) {
    auto& c = convs[i];
    fn(fmt::format("conv{}.w0", i), c.w0, ParamKind::backbone);
    if (c.has_bias()) fn(fmt::format("conv{}.bias", i), c.bias, ParamKind::backbone);
    for (std::size_t t = 0; t < c.experts.size(); ++t) {
      fn(fmt::format("conv{}.expert{}.B", i, t), c.experts[t].b_factor, ParamKind::expert);
      fn(fmt::format("conv{}.expert{}.A", i, t), c.experts[t].a_factor, ParamKind::expert);
    }
  }
  for (std::size_t h = 0; h < heads.size(); ++h) {
    fn(fmt::format("head{}.weight", h), heads[h].weight, ParamKind::head);
    fn(fmt::format("head{}.bias", h), heads[h].bias, ParamKind::head);
  }
  if (!projection.empty()) {
    fn("proj.weight", projection.weight, ParamKind::projection);
    fn("proj.bias", projection.bias, ParamKind::projection);
  }
}

template <typename T>
void Network<T>::for_each_param(
    const std::function<void(const std::string&, const Tensor<T>&, ParamKind)>& fn) const {
  const_cast<Network<T>*>(this)->for_each_param(
      [&](const std::string& name, Tensor<T>& t, ParamKind kind) { fn(name, t, kind); });
}

template <typename T>
std::size_t Network<T>::param_count() const {
  std::size_t n = 0;
  for_each_param([&](const std::string&, const Tensor<T>& t, ParamKind) { n += t.size(); });
  return n;
}

template <typename T>
std::size_t Network<T>::backbone_param_count() const {
  std::size_t n = 0;
  for_each_param([&](const std::string&, const Tensor<T>& t, ParamKind k) {
    if (k == ParamKind::backbone) n += t.size();
  });
  return n;
}

template <typename T>
std::size_t Network<T>::head_param_count() const {
  std::size_t n = 0;
  for_each_param([&](const std::string&, const Tensor<T>& t, ParamKind k) {
    if (k == ParamKind::head) n += t.size();
  });
  return n;
}

template <typename T>
std::size_t Network<T>::expert_param_count() const {
  std::size_t n = 0;
  for_each_param([&](const std::string&, const Tensor<T>& t, ParamKind k) {
    if (k == ParamKind::expert) n += t.size();
  });
  return n;
}

template <typename T>
template <typename U>
Network<U> Network<T>::cast() const {
  Network<U> out;
  out.mode = mode;
  out.role = role;
  out.input_channels = input_channels;
  out.class_counts = class_counts;
  out.extracted_task = extracted_task;
  out.layers = layers;
  for (const auto& c : convs) {
    EksConvLayer<U> cu{c.geometry, c.w0.template cast<U>(), c.bias.empty() ? Tensor<U>() : c.bias.template cast<U>(),
                       {}};
    for (const auto& e : c.experts)
      cu.experts.push_back({e.b_factor.template cast<U>(), e.a_factor.template cast<U>(), e.rank, e.geometry});
    out.convs.push_back(std::move(cu));
  }
  for (const auto& h : heads) out.heads.push_back({h.weight.template cast<U>(), h.bias.template cast<U>()});
  if (!projection.empty())
    out.projection = {projection.weight.template cast<U>(), projection.bias.template cast<U>()};
  return out;
}

template <typename T>
void Network<T>::validate() const {
  if (class_counts.empty()) throw ValueError("network has no tasks");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if ((l.kind == LayerKind::eks_conv || l.kind == LayerKind::plain_conv) && l.conv >= convs.size()) {
      throw ValueError(fmt::format("layer {} refers to missing conv {}", i, l.conv));
    }
    if (l.kind == LayerKind::concat && l.skip_from >= i) {
      throw ValueError(fmt::format("layer {} concatenates a non-preceding layer {}", i, l.skip_from));
    }
  }
  for (const auto& c : convs) {
    c.validate();
    if (!c.experts.empty() && c.experts.size() != task_count()) {
      throw ValueError(fmt::format("conv carries {} experts for {} tasks", c.experts.size(), task_count()));
    }
  }
  if (mode == NetMode::cls) {
    if (role == NetRole::student && heads.size() != task_count()) {
      throw ValueError(fmt::format("student has {} heads for {} tasks", heads.size(), task_count()));
    }
    if (role != NetRole::student && heads.size() != 1) throw ValueError("teacher/extracted nets have one head");
  }
}

template <typename T>
Network<T> zeros_like(const Network<T>& net) {
  Network<T> z = net;
  z.for_each_param([](const std::string&, Tensor<T>& t, ParamKind) { t.fill(T(0)); });
  return z;
}

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::uint64_t seed) {
  Tensor<T> t(std::move(shape));
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (T& v : t.data()) v = static_cast<T>(normal(gen));
  return t;
}

struct ConvSlot {
  std::size_t in, out, kernel, stride, padding;
};

/// Appends a conv layer (and its parameters) to the network.
template <typename T>
void push_conv(Network<T>& net, const ConvSlot& slot, bool eks, std::uint64_t seed) {
  ConvGeometry g{slot.in, slot.out, slot.kernel, slot.stride, slot.padding, 1};
  g.validate();
  const std::size_t index = net.convs.size();
  const double he = std::sqrt(2.0 / static_cast<double>(slot.in * slot.kernel * slot.kernel));
  net.convs.push_back(
      {g, normal_tensor<T>(g.weight_shape(), he, derive_seed(seed, {1, index})), Tensor<T>({slot.out}), {}});
  net.layers.push_back({eks ? LayerKind::eks_conv : LayerKind::plain_conv, index, 0});
}

template <typename T>
void push(Network<T>& net, LayerKind kind, std::size_t skip_from = 0) {
  net.layers.push_back({kind, 0, skip_from});
}

template <typename T>
LinearHead<T> make_head(std::size_t in, std::size_t out, double stddev, std::uint64_t seed) {
  return {normal_tensor<T>({out, in}, stddev, seed), Tensor<T>({out})};
}

constexpr double kHeadStd = 0.01;

template <typename T>
void build_cls_trunk(Network<T>& net, std::size_t in_ch, std::size_t w, bool eks, std::uint64_t seed) {
  push_conv(net, {in_ch, w, 3, 1, 1}, eks, seed);
  push(net, LayerKind::relu);
  push_conv(net, {w, 2 * w, 3, 2, 1}, eks, seed);
  push(net, LayerKind::relu);
  push_conv(net, {2 * w, 4 * w, 3, 1, 1}, eks, seed);
  push(net, LayerKind::relu);
  push_conv(net, {4 * w, 4 * w, 3, 2, 1}, eks, seed);
  push(net, LayerKind::relu);
  push(net, LayerKind::global_avg_pool);
}

template <typename T>
void build_seg_trunk(Network<T>& net, std::size_t in_ch, std::size_t w, std::size_t out_ch, bool eks,
                     std::uint64_t seed) {
  push_conv(net, {in_ch, w, 3, 1, 1}, eks, seed);      // 0
  push(net, LayerKind::relu);                          // 1  skip (full res)
  push_conv(net, {w, 2 * w, 3, 2, 1}, eks, seed);      // 2
  push(net, LayerKind::relu);                          // 3  skip (half res)
  push_conv(net, {2 * w, 4 * w, 3, 2, 1}, eks, seed);  // 4
  push(net, LayerKind::relu);                          // 5
  push(net, LayerKind::upsample);                      // 6
  push(net, LayerKind::concat, 3);                     // 7
  push_conv(net, {6 * w, 2 * w, 3, 1, 1}, eks, seed);  // 8
  push(net, LayerKind::relu);                          // 9
  push(net, LayerKind::upsample);                      // 10
  push(net, LayerKind::concat, 1);                     // 11
  push_conv(net, {3 * w, w, 3, 1, 1}, eks, seed);      // 12
  push(net, LayerKind::relu);                          // 13
  push_conv(net, {w, out_ch, 1, 1, 0}, eks, seed);     // 14
  push(net, LayerKind::sigmoid);                       // 15
}

void check_counts(const std::vector<std::size_t>& counts, std::size_t width, std::size_t min_width) {
  if (counts.empty()) throw ValueError("at least one task is required");
  for (std::size_t c : counts)
    if (c == 0) throw ValueError("every task needs at least one class / mask channel");
  if (width < min_width) throw ValueError(fmt::format("width must be >= {}, got {}", min_width, width));
}

}  // namespace

template <typename T>
Network<T> build_student_cls(const StudentOptions& o) {
  check_counts(o.class_counts, o.width, 4);
  if (!o.ranks.empty() && o.ranks.size() != o.class_counts.size()) {
    throw ValueError(fmt::format("{} ranks for {} tasks", o.ranks.size(), o.class_counts.size()));
  }
  Network<T> net;
  net.mode = NetMode::cls;
  net.role = NetRole::student;
  net.input_channels = o.input_channels;
  net.class_counts = o.class_counts;
  const bool eks = !o.ranks.empty();
  build_cls_trunk(net, o.input_channels, o.width, eks, o.seed);
  const std::size_t features = 4 * o.width;
  for (std::size_t t = 0; t < o.class_counts.size(); ++t)
    net.heads.push_back(make_head<T>(features, o.class_counts[t], kHeadStd, derive_seed(o.seed, {2, t})));
  if (o.projection_width > 0) {
    net.projection = make_head<T>(features, o.projection_width, 1.0 / std::sqrt(static_cast<double>(features)),
                                  derive_seed(o.seed, {4}));
  }
  if (eks) attach_experts(net, o.ranks, derive_seed(o.seed, {3}));
  net.validate();
  return net;
}

template <typename T>
Network<T> build_student_seg(const StudentOptions& o) {
  check_counts(o.class_counts, o.width, 4);
  if (!o.ranks.empty() && o.ranks.size() != o.class_counts.size()) {
    throw ValueError(fmt::format("{} ranks for {} tasks", o.ranks.size(), o.class_counts.size()));
  }
  Network<T> net;
  net.mode = NetMode::seg;
  net.role = NetRole::student;
  net.input_channels = o.input_channels;
  net.class_counts = o.class_counts;
  const bool eks = !o.ranks.empty();
  const std::size_t out_ch = *std::max_element(o.class_counts.begin(), o.class_counts.end());
  build_seg_trunk(net, o.input_channels, o.width, out_ch, eks, o.seed);
  if (eks) attach_experts(net, o.ranks, derive_seed(o.seed, {3}));
  net.validate();
  return net;
}

template <typename T>
Network<T> build_teacher(const TeacherOptions& o) {
  check_counts(o.class_counts, o.width, 4);
  Network<T> net;
  net.mode = o.mode;
  net.role = NetRole::teacher;
  net.input_channels = o.input_channels;
  net.class_counts = o.class_counts;
  const std::size_t total = std::accumulate(o.class_counts.begin(), o.class_counts.end(), std::size_t{0});
  const std::uint64_t seed = derive_seed(o.seed, {7});
  if (o.mode == NetMode::cls) {
    build_cls_trunk(net, o.input_channels, o.width, false, seed);
    net.heads.push_back(make_head<T>(4 * o.width, total, kHeadStd, derive_seed(seed, {2, 0})));
  } else {
    build_seg_trunk(net, o.input_channels, o.width, total, false, seed);
  }
  net.validate();
  return net;
}

template <typename T>
void check_expert_budget(const Network<T>& net) {
  std::size_t dense = 0;
  for (const auto& c : net.convs)
    if (!c.experts.empty()) dense += c.geometry.weight_size();
  for (std::size_t t = 0; t < net.task_count(); ++t) {
    std::size_t expert = 0;
    for (const auto& c : net.convs)
      if (!c.experts.empty()) expert += lorkd::expert_param_count(c.geometry, c.experts[t].rank);
    if (expert > 0 && expert >= dense) {
      throw ValueError(fmt::format(
          "task {}: rank {} experts need {} parameters, not below the {} dense conv weights; "
          "widen the network or lower the rank",
          t, net.expert_rank(t), expert, dense));
    }
  }
}

template <typename T>
void attach_experts(Network<T>& net, const std::vector<std::size_t>& ranks, std::uint64_t seed) {
  if (ranks.size() != net.task_count()) {
    throw ValueError(fmt::format("rank plan has {} entries for {} tasks", ranks.size(), net.task_count()));
  }
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    LayerSpec& spec = net.layers[i];
    if (spec.kind != LayerKind::eks_conv && spec.kind != LayerKind::plain_conv) continue;
    auto& conv = net.convs[spec.conv];
    conv.experts.clear();
    for (std::size_t t = 0; t < ranks.size(); ++t)
      conv.experts.push_back(init_lowrank<T>(conv.geometry, ranks[t], derive_seed(seed, {spec.conv, t})));
    spec.kind = LayerKind::eks_conv;
  }
  check_expert_budget(net);
}

namespace {

template <typename T>
std::size_t head_of(const Network<T>& net, const TaskIndexMatrix& tasks, std::size_t sample) {
  return net.heads.size() == 1 ? 0 : tasks.task_of(sample);
}

}  // namespace

template <typename T>
ForwardPass<T> forward_decomposed(const Network<T>& net, const Tensor<T>& input, const TaskIndexMatrix& tasks) {
  if (input.rank() != 4 || input.dim(1) != net.input_channels) {
    throw ShapeError(fmt::format("network input must be [B,{},H,W], got {}", net.input_channels,
                                 shape_string(input.shape())));
  }
  if (tasks.batch() != input.dim(0)) {
    throw ShapeError(fmt::format("task matrix has B={} for a batch of {}", tasks.batch(), input.dim(0)));
  }
  if (tasks.task_count() != net.task_count() && net.role == NetRole::student) {
    throw ShapeError(fmt::format("task matrix has T={} for a {}-task network", tasks.task_count(), net.task_count()));
  }
  ForwardPass<T> pass;
  pass.input = input;
  pass.tasks = tasks;
  pass.outputs.resize(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& spec = net.layers[i];
    const Tensor<T>& in = i == 0 ? input : pass.outputs[i - 1];
    Tensor<T>& out = pass.outputs[i];
    switch (spec.kind) {
      case LayerKind::eks_conv:
      case LayerKind::plain_conv: out = eks_forward(net.convs[spec.conv], in, tasks); break;
      case LayerKind::relu: out = relu(in); break;
      case LayerKind::upsample: out = upsample2x(in); break;
      case LayerKind::concat: out = concat_channels(in, pass.outputs[spec.skip_from]); break;
      case LayerKind::global_avg_pool: out = global_avg_pool(in); break;
      case LayerKind::sigmoid: out = sigmoid(in); break;
    }
  }
  pass.output = pass.outputs.back();

  if (net.mode == NetMode::cls) {
    const std::size_t batch = input.dim(0);
    for (std::size_t b = 0; b < batch; ++b) {
      const LinearHead<T>& head = net.heads[head_of(net, tasks, b)];
      const Tensor<T> row = slice_batch(pass.output, b, b + 1);
      pass.logits.push_back(linear(row, head.weight, head.bias).reshaped({head.weight.dim(0)}));
    }
    if (!net.projection.empty()) pass.projected = linear(pass.output, net.projection.weight, net.projection.bias);
  }
  return pass;
}

namespace {

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.empty())
    dst = src;
  else
    dst += src;
}

}  // namespace

template <typename T>
Network<T> backward_decomposed(const Network<T>& net, const ForwardPass<T>& pass, const OutputGrads<T>& grads) {
  Network<T> g = zeros_like(net);
  std::vector<Tensor<T>> gout(net.layers.size());
  Tensor<T>& top = gout.back();
  if (!grads.output.empty()) {
    if (grads.output.shape() != pass.output.shape()) {
      throw ShapeError(fmt::format("output gradient {} for output {}", shape_string(grads.output.shape()),
                                   shape_string(pass.output.shape())));
    }
    top = grads.output;
  }

  if (net.mode == NetMode::cls) {
    const std::size_t batch = pass.output.dim(0), width = pass.output.dim(1);
    if (!grads.logits.empty()) {
      if (grads.logits.size() != batch) throw ShapeError("one logit gradient per sample is required");
      if (top.empty()) top = Tensor<T>(pass.output.shape());
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t h = head_of(net, pass.tasks, b);
        const LinearHead<T>& head = net.heads[h];
        const Tensor<T>& gl = grads.logits[b];
        const std::size_t classes = head.weight.dim(0);
        if (gl.size() != classes) throw ShapeError(fmt::format("sample {}: logit gradient size mismatch", b));
        const T* f = pass.output.raw() + b * width;
        for (std::size_t c = 0; c < classes; ++c) {
          const T gv = gl[c];
          if (gv == T(0)) continue;
          g.heads[h].bias[c] += gv;
          for (std::size_t j = 0; j < width; ++j) {
            g.heads[h].weight[c * width + j] += gv * f[j];
            top[b * width + j] += gv * head.weight[c * width + j];
          }
        }
      }
    }
    if (!grads.projected.empty()) {
      if (net.projection.empty()) throw ValueError("projection gradient given for a network without projection");
      auto lg = linear_backward(grads.projected, pass.output, net.projection.weight);
      g.projection.weight = std::move(lg.weight);
      g.projection.bias = std::move(lg.bias);
      accumulate(top, lg.input);
    }
  }

  for (std::size_t i = net.layers.size(); i-- > 0;) {
    if (gout[i].empty()) continue;
    const LayerSpec& spec = net.layers[i];
    const Tensor<T>& in = i == 0 ? pass.input : pass.outputs[i - 1];
    Tensor<T> gin;
    switch (spec.kind) {
      case LayerKind::eks_conv:
      case LayerKind::plain_conv: {
        auto eg = eks_backward(net.convs[spec.conv], in, pass.tasks, gout[i]);
        auto& gc = g.convs[spec.conv];
        gc.w0 = std::move(eg.w0);
        if (!eg.bias.empty()) gc.bias = std::move(eg.bias);
        for (std::size_t t = 0; t < eg.experts.size(); ++t) {
          gc.experts[t].b_factor = std::move(eg.experts[t].b_factor);
          gc.experts[t].a_factor = std::move(eg.experts[t].a_factor);
        }
        gin = std::move(eg.input);
        break;
      }
      case LayerKind::relu: gin = relu_backward(gout[i], pass.outputs[i]); break;
      case LayerKind::upsample: gin = upsample2x_backward(gout[i]); break;
      case LayerKind::concat: {
        auto [ga, gb] = split_channels(gout[i], in.dim(1));
        accumulate(gout[spec.skip_from], gb);
        gin = std::move(ga);
        break;
      }
      case LayerKind::global_avg_pool: gin = global_avg_pool_backward(gout[i], in.shape()); break;
      case LayerKind::sigmoid: gin = sigmoid_backward(gout[i], pass.outputs[i]); break;
    }
    if (i > 0) accumulate(gout[i - 1], gin);
  }
  return g;
}

template <typename T>
Network<T> extract_expert(const Network<T>& net, std::size_t task) {
  if (net.role != NetRole::student) throw ValueError("only decomposed student networks can be extracted");
  if (task >= net.task_count()) {
    throw ValueError(fmt::format("task {} out of range for a {}-task network", task, net.task_count()));
  }
  Network<T> out;
  out.mode = net.mode;
  out.role = NetRole::extracted;
  out.input_channels = net.input_channels;
  out.class_counts = {net.class_counts[task]};
  out.extracted_task = task;
  out.layers = net.layers;
  for (const auto& c : net.convs) {
    EksConvLayer<T> plain{c.geometry, c.experts.empty() ? c.w0 : fuse_weights(c.w0, c.experts[task]), c.bias, {}};
    out.convs.push_back(std::move(plain));
  }
  for (auto& l : out.layers)
    if (l.kind == LayerKind::eks_conv) l.kind = LayerKind::plain_conv;
  if (net.mode == NetMode::cls) {
    out.heads = {net.heads[task]};
  } else {
    // keep only this task's mask channels in the output conv
    auto& last = out.convs.back();
    const std::size_t keep = net.class_counts[task];
    const std::size_t per_channel = last.geometry.weight_size() / last.geometry.out_channels;
    std::vector<T> w(last.w0.raw(), last.w0.raw() + keep * per_channel);
    std::vector<T> b(last.bias.raw(), last.bias.raw() + keep);
    last.geometry.out_channels = keep;
    last.w0 = Tensor<T>(last.geometry.weight_shape(), std::move(w));
    last.bias = Tensor<T>({keep}, std::move(b));
  }
  out.validate();
  return out;
}

template struct Network<float>;
template struct Network<double>;
template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;

#define LORKD_INSTANTIATE(T)                                                                                  \
  template Network<T> zeros_like<T>(const Network<T>&);                                                      \
  template Network<T> build_student_cls<T>(const StudentOptions&);                                           \
  template Network<T> build_student_seg<T>(const StudentOptions&);                                           \
  template Network<T> build_teacher<T>(const TeacherOptions&);                                               \
  template void attach_experts<T>(Network<T>&, const std::vector<std::size_t>&, std::uint64_t);              \
  template void check_expert_budget<T>(const Network<T>&);                                                   \
  template ForwardPass<T> forward_decomposed<T>(const Network<T>&, const Tensor<T>&, const TaskIndexMatrix&); \
  template Network<T> backward_decomposed<T>(const Network<T>&, const ForwardPass<T>&, const OutputGrads<T>&); \
  template Network<T> extract_expert<T>(const Network<T>&, std::size_t);

LORKD_INSTANTIATE(float)
LORKD_INSTANTIATE(double)
#undef LORKD_INSTANTIATE

}  // namespace lorkd
