#include "dgl/greedy_net.hpp"

#include <algorithm>
#include <stdexcept>

namespace dgl {

std::string to_string(AuxKind kind) {
  switch (kind) {
    case AuxKind::Cnn:
      return "cnn";
    case AuxKind::Mlp:
      return "mlp";
    case AuxKind::MlpSr:
      return "mlp-sr";
  }
  return "mlp";
}

AuxKind parse_aux_kind(const std::string& text) {
  if (text == "cnn") return AuxKind::Cnn;
  if (text == "mlp") return AuxKind::Mlp;
  if (text == "mlp-sr") return AuxKind::MlpSr;
  throw std::invalid_argument("unknown auxiliary head kind '" + text + "' (expected cnn, mlp or mlp-sr)");
}

void NetworkSpec::validate() const {
  if (modules.empty()) throw std::invalid_argument("network has no modules");
  if (class_count == 0) throw std::invalid_argument("class_count must be positive");
  Shape cur = input;
  for (std::size_t j = 0; j < modules.size(); ++j) {
    const auto& m = modules[j];
    if (!(m.input == cur))
      throw ShapeError("module " + std::to_string(j + 1) + " declares input " + m.input.str() + " but receives " +
                       cur.str());
    const Shape out = stack_output_shape(m.body, m.input);
    if (!(out == m.output))
      throw ShapeError("module " + std::to_string(j + 1) + " declares output " + m.output.str() + " but produces " +
                       out.str());
    const Shape logits = stack_output_shape(m.head, m.output);
    if (logits.per_sample() != class_count)
      throw ShapeError("module " + std::to_string(j + 1) + " head emits " + std::to_string(logits.per_sample()) +
                       " logits for " + std::to_string(class_count) + " classes");
    if (m.final != (j + 1 == modules.size()))
      throw std::invalid_argument("exactly the last module must carry the final classifier");
    cur = out;
  }
}

namespace {

std::size_t pooled_extent(std::size_t extent) { return extent % 2 == 0 ? 2 : 1; }

void append_mlp(std::vector<LayerSpec>& out, std::size_t channels, std::size_t extent, std::size_t classes,
                std::size_t hidden) {
  const std::size_t p = pooled_extent(extent);
  out.push_back(LayerSpec::avg_pool_to(p));
  std::size_t in = channels * p * p;
  for (int i = 0; i < 3; ++i) {
    out.push_back(LayerSpec::dense(in, hidden));
    out.push_back(LayerSpec::relu());
    in = hidden;
  }
  out.push_back(LayerSpec::dense(in, classes));
}

}  // namespace

std::vector<LayerSpec> make_aux_head(AuxKind kind, std::size_t channels, std::size_t extent,
                                     std::size_t class_count, std::size_t hidden) {
  std::vector<LayerSpec> out;
  switch (kind) {
    case AuxKind::Cnn: {
      for (int i = 0; i < 2; ++i) {
        out.push_back(LayerSpec::conv(channels, channels, 3));
        out.push_back(LayerSpec::batch_norm(channels));
        out.push_back(LayerSpec::relu());
      }
      const std::size_t p = pooled_extent(extent);
      out.push_back(LayerSpec::avg_pool_to(p));
      out.push_back(LayerSpec::dense(channels * p * p, class_count));
      break;
    }
    case AuxKind::Mlp:
      append_mlp(out, channels, extent, class_count, hidden);
      break;
    case AuxKind::MlpSr: {
      std::size_t reduced = extent;
      if (extent % 4 == 0 && extent / 4 >= 2) reduced = extent / 4;
      if (reduced != extent) out.push_back(LayerSpec::avg_pool_to(reduced));
      for (int i = 0; i < 3; ++i) {
        out.push_back(LayerSpec::conv(channels, channels, 1));
        out.push_back(LayerSpec::relu());
      }
      append_mlp(out, channels, reduced, class_count, hidden);
      break;
    }
  }
  return out;
}

std::vector<LayerSpec> make_final_classifier(std::size_t channels, std::size_t extent, std::size_t class_count,
                                             std::size_t hidden) {
  const std::size_t p = pooled_extent(extent);
  return {LayerSpec::avg_pool_to(p),
          LayerSpec::dense(channels * p * p, hidden),
          LayerSpec::relu(),
          LayerSpec::dense(hidden, hidden),
          LayerSpec::relu(),
          LayerSpec::dense(hidden, class_count)};
}

NetworkSpec build_network(Shape input, const std::vector<std::vector<ConvStage>>& modules, std::size_t class_count,
                          AuxKind aux, std::size_t head_width) {
  if (modules.empty()) throw std::invalid_argument("build_network: no modules");
  NetworkSpec net;
  net.class_count = class_count;
  input.batch = 1;
  net.input = input;
  net.aux = aux;

  Shape cur = input;
  for (std::size_t j = 0; j < modules.size(); ++j) {
    if (modules[j].empty()) throw std::invalid_argument("build_network: module " + std::to_string(j + 1) + " is empty");
    ModuleSpec m;
    m.input = cur;
    std::size_t channels = cur.channels;
    for (const auto& stage : modules[j]) {
      if (stage.width == 0) throw std::invalid_argument("build_network: zero-width stage");
      if (stage.pool_before) m.body.push_back(LayerSpec::max_pool());
      m.body.push_back(LayerSpec::conv(channels, stage.width, 3));
      m.body.push_back(LayerSpec::batch_norm(stage.width));
      m.body.push_back(LayerSpec::relu());
      channels = stage.width;
    }
    m.output = stack_output_shape(m.body, m.input);
    cur = m.output;
    net.modules.push_back(std::move(m));
  }

  const auto& first = net.modules.front().output;
  net.head_width = head_width != 0 ? head_width : first.channels * pooled_extent(first.height) * pooled_extent(first.height);
  for (std::size_t j = 0; j < net.modules.size(); ++j) {
    auto& m = net.modules[j];
    m.final = j + 1 == net.modules.size();
    m.head = m.final ? make_final_classifier(m.output.channels, m.output.height, class_count, net.head_width)
                     : make_aux_head(aux, m.output.channels, m.output.height, class_count, net.head_width);
  }
  net.validate();
  return net;
}

NetworkSpec build_reference_net(std::size_t width, std::size_t depth_modules, std::size_t class_count, AuxKind aux,
                                std::size_t input_channels, std::size_t input_extent) {
  if (width == 0) throw std::invalid_argument("build_reference_net: width must be at least 1");
  if (depth_modules != 4 && depth_modules != 6)
    throw std::invalid_argument("build_reference_net: unsupported depth " + std::to_string(depth_modules) +
                                " (expected 4 or 6)");
  std::vector<std::vector<ConvStage>> stages = {
      {{width, false}}, {{2 * width, true}}, {{2 * width, false}}, {{4 * width, true}}};
  if (depth_modules == 6) {
    stages.push_back({{4 * width, false}});
    stages.push_back({{4 * width, false}});
  }
  return build_network({1, input_channels, input_extent, input_extent}, stages, class_count, aux);
}

std::vector<std::size_t> channel_plan(const NetworkSpec& net) {
  std::vector<std::size_t> out;
  for (const auto& m : net.modules) out.push_back(m.output.channels);
  return out;
}

FlopReport flop_report(const NetworkSpec& net) {
  FlopReport r;
  for (const auto& m : net.modules) {
    r.module_flops.push_back(stack_flops(m.body, m.input));
    if (m.final) {
      r.aux_flops.push_back(0);
      r.classifier_flops = stack_flops(m.head, m.output);
    } else {
      r.aux_flops.push_back(stack_flops(m.head, m.output));
    }
  }
  r.largest_module = r.module_flops.empty() ? 0 : *std::max_element(r.module_flops.begin(), r.module_flops.end());
  for (auto f : r.aux_flops) {
    const double ratio = r.largest_module == 0 ? 0.0 : static_cast<double>(f) / static_cast<double>(r.largest_module);
    r.aux_ratio.push_back(ratio);
    r.max_aux_ratio = std::max(r.max_aux_ratio, ratio);
  }
  r.first_aux_ratio = r.aux_ratio.empty() ? 0.0 : r.aux_ratio.front();
  return r;
}

template <typename T>
GreedyModule<T>::GreedyModule(ModuleSpec spec, Rng& rng) : spec_(std::move(spec)) {
  body_ = Sequential<T>(spec_.body, rng);
  head_ = Sequential<T>(spec_.head, rng);
}

template <typename T>
StepResult<T> GreedyModule<T>::local_loss(const Tensor<T>& input, std::span<const int> labels) {
  const Shape& s = input.shape();
  if (s.channels != spec_.input.channels || s.height != spec_.input.height || s.width != spec_.input.width)
    throw ShapeError("module input " + s.str() + " does not match declared extents " + spec_.input.str());
  body_.zero_grad();
  head_.zero_grad();
  StepResult<T> r;
  r.output = body_.forward(input, Mode::Train);
  const Tensor<T> z = head_.forward(r.output, Mode::Train);
  auto ce = cross_entropy(z, labels);
  r.loss = ce.loss;
  r.correct = ce.correct;
  body_.backward(head_.backward(ce.grad));
  r.grad_norm_sq = grad_norm_sq(parameters());
  return r;
}

template <typename T>
StepResult<T> GreedyModule<T>::train_step(const Tensor<T>& input, std::span<const int> labels,
                                          const SgdOptions& opt) {
  auto r = local_loss(input, labels);
  sgd_step(parameters(), opt);
  return r;
}

template <typename T>
std::vector<Parameter<T>*> GreedyModule<T>::parameters() {
  auto p = body_.parameters();
  for (auto* q : head_.parameters()) p.push_back(q);
  return p;
}

template <typename T>
Partition<T>::Partition(const NetworkSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  for (std::size_t j = 0; j < spec_.modules.size(); ++j) {
    Rng rng(derive_seed(seed, "module", j));
    modules_.emplace_back(spec_.modules[j], rng);
  }
}

template <typename T>
Tensor<T> Partition<T>::forward(const Tensor<T>& x0, Mode mode, std::size_t count) {
  Tensor<T> x = x0;
  for (std::size_t j = 0; j < count && j < modules_.size(); ++j) x = modules_[j].forward(x, mode);
  return x;
}

template <typename T>
std::vector<T> Partition<T>::flat_parameters() {
  std::vector<T> out;
  for (auto& m : modules_)
    for (auto* p : m.parameters()) out.insert(out.end(), p->value.values().begin(), p->value.values().end());
  return out;
}

template class GreedyModule<float>;
template class GreedyModule<double>;
template class Partition<float>;
template class Partition<double>;

}  // namespace dgl
