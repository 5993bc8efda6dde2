// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s6mod/branch.hpp"
#include "s6mod/datasets.hpp"
#include "s6mod/errors.hpp"
#include "s6mod/metrics.hpp"
#include "s6mod/nn.hpp"
#include "s6mod/ops.hpp"
#include "s6mod/replay.hpp"
#include "s6mod/tensor.hpp"

namespace s6mod {

enum class EvalHead { base, etf };

struct ModelConfig {
  BackboneConfig backbone;
  BranchConfig branch;
  bool use_s6mod = true;
};

/// Backbone, base linear head (ER), and the optional side branch.
class Model {
 public:
  Model() = default;

  static Model init(const ModelConfig& config, std::uint64_t seed) {
    Model m;
    m.config_ = config;
    m.config_.branch.in_channels = config.backbone.channels;
    Rng rng(Rng::mix(seed, 0x6d6f64656cULL));
    m.backbone_ = Backbone::init(config.backbone, rng);
    m.head_ = Linear::init(config.backbone.channels, config.branch.classes, rng);
    if (config.use_s6mod) m.branch_ = S6ModBranch::init(m.config_.branch, Rng::mix(seed, 0x6272ULL));
    return m;
  }

  const ModelConfig& config() const { return config_; }
  bool has_branch() const { return branch_.has_value(); }
  const Backbone& backbone() const { return backbone_; }
  const Linear& head() const { return head_; }
  const S6ModBranch& branch() const { return branch_.value(); }
  S6ModBranch& branch() { return branch_.value(); }

  ParamList parameters() const {
    ParamList out;
    backbone_.collect("backbone", out);
    head_.collect("head", out);
    if (branch_) branch_->collect("branch", out);
    return out;
  }

 private:
  ModelConfig config_;
  Backbone backbone_;
  Linear head_;
  std::optional<S6ModBranch> branch_;
};

struct StepLosses {
  double base = 0.0;
  double dr = 0.0;
  double diff = 0.0;
  double cont = 0.0;
  double z = 0.0;
  double total = 0.0;
};

/// Graph of one training step's objective, before the optimizer runs.
struct StepGraph {
  Tensor total;
  StepLosses values;
  Tensor pooled_input;  // branch prototype features, undefined without a branch
};

/// L_all = CE(base head) + branch terms, on a labeled batch.
inline StepGraph compute_losses(const Model& model, const Tensor& inputs, std::span<const std::size_t> labels) {
  const auto fmap = model.backbone()(inputs);
  const auto logits = model.head()(spatial_mean(fmap));
  const auto log_p = log_softmax(logits, 1);
  const auto base = neg(mean(gather_rows(log_p, labels)));

  StepGraph g;
  g.values.base = base.item();
  if (!model.has_branch()) {
    g.total = base;
    g.values.total = g.values.base;
    return g;
  }
  const auto& branch = model.branch();
  const auto out = branch.forward(fmap, labels);
  const auto terms = s6mod_loss(out, exp(log_p), labels, branch.etf(), branch.config().alpha, branch.config().beta,
                                branch.config().stop_q_grad);
  g.total = add(base, terms.total);
  g.values.dr = terms.dr.item();
  g.values.diff = terms.diff.item();
  g.values.cont = terms.cont.item();
  g.values.z = terms.z.item();
  g.values.total = g.total.item();
  g.pooled_input = out.pooled_input;
  return g;
}

struct TrainConfig {
  double lr = 0.05;
  std::size_t replay_batch = 64;
  double clip_norm = 5.0;  // 0 disables
};

/// One online step: stream batch + replay draw, SGD, prototype and buffer
/// updates. Throws NumericError if the loss is not finite.
inline StepLosses train_step(Model& model, const Dataset& data, std::span<const std::size_t> stream,
                             ReplayBuffer& buffer, const TrainConfig& config) {
  const auto replay = buffer.draw(config.replay_batch);
  std::vector<double> values;
  std::vector<std::size_t> labels;
  values.reserve((stream.size() + replay.size()) * data.sample_size());
  for (auto i : stream) {
    const auto x = data.input(i);
    values.insert(values.end(), x.begin(), x.end());
    labels.push_back(data.labels[i]);
  }
  for (auto slot : replay) {
    const auto x = buffer.input(slot);
    values.insert(values.end(), x.begin(), x.end());
    labels.push_back(buffer.label(slot));
  }
  Shape shape{labels.size()};
  shape.insert(shape.end(), data.sample_shape.begin(), data.sample_shape.end());
  const auto inputs = Tensor::from(std::move(shape), std::move(values));

  StepGraph graph;
  try {
    graph = compute_losses(model, inputs, labels);
  } catch (const DomainError& e) {
    throw NumericError(std::string("training diverged: ") + e.what());
  }
  if (!std::isfinite(graph.values.total)) {
    throw NumericError("non-finite training loss (base " + std::to_string(graph.values.base) + ", total " +
                       std::to_string(graph.values.total) + ")");
  }
  auto params = model.parameters();
  graph.total.backward();
  if (!std::isfinite(grad_norm(params))) throw NumericError("non-finite gradient");
  sgd_step(params, config.lr, config.clip_norm);
  if (model.has_branch()) model.branch().update_prototypes(graph.pooled_input, labels);
  for (auto i : stream) buffer.add(data.input(i), data.labels[i]);
  return graph.values;
}

/// Predicted class per sample, in batches, without recording a graph.
inline std::vector<std::size_t> predict(const Model& model, const Dataset& data, std::span<const std::size_t> index,
                                        EvalHead head = EvalHead::base, std::size_t batch = 256) {
  if (head == EvalHead::etf && !model.has_branch()) throw ConfigError("ETF prediction needs the branch", "eval_head");
  NoGradGuard no_grad;
  std::vector<std::size_t> out;
  out.reserve(index.size());
  for (std::size_t start = 0; start < index.size(); start += batch) {
    const auto chunk = index.subspan(start, std::min(batch, index.size() - start));
    const auto fmap = model.backbone()(stack_inputs(data, chunk));
    const auto scores = head == EvalHead::base ? model.head()(spatial_mean(fmap)) : model.branch().forward(fmap).q;
    const std::size_t k = scores.dim(1);
    const auto v = scores.data();
    for (std::size_t s = 0; s < chunk.size(); ++s) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (v[s * k + c] > v[s * k + best]) best = c;
      out.push_back(best);
    }
  }
  return out;
}

/// Accuracy of every task in `tasks` on its test split.
inline std::vector<double> evaluate(const Model& model, const Dataset& test, std::span<const Task> tasks,
                                    EvalHead head = EvalHead::base) {
  std::vector<double> acc;
  for (const auto& t : tasks) {
    if (t.test.empty()) {
      acc.push_back(0.0);
      continue;
    }
    const auto pred = predict(model, test, t.test, head);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == test.labels[t.test[i]];
    acc.push_back(static_cast<double>(hits) / static_cast<double>(pred.size()));
  }
  return acc;
}

/// Pooled backbone features [n x C_b] for export.
inline std::vector<double> backbone_features(const Model& model, const Dataset& data,
                                             std::span<const std::size_t> index, std::size_t batch = 256) {
  NoGradGuard no_grad;
  std::vector<double> out;
  for (std::size_t start = 0; start < index.size(); start += batch) {
    const auto chunk = index.subspan(start, std::min(batch, index.size() - start));
    const auto pooled = spatial_mean(model.backbone()(stack_inputs(data, chunk)));
    out.insert(out.end(), pooled.data().begin(), pooled.data().end());
  }
  return out;
}

}  // namespace s6mod
