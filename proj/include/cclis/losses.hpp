#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "cclis/model.hpp"
#include "cclis/tensor.hpp"

namespace cclis {

/// One training batch: a current-task half and a buffered half carrying the
/// stored proposal probabilities. Labels are prototype row indices.
struct BatchView {
  Tensor current_inputs;  // (n_cur x input_dim)
  std::vector<int> current_labels;
  Tensor buffered_inputs;  // (n_buf x input_dim), n_buf may be 0
  std::vector<int> buffered_labels;
  std::vector<double> buffered_g;  // full-buffer proposal probability per sample
  std::vector<int> current_classes;  // class roster of the running task
  std::vector<int> past_classes;     // classes with buffered data

  std::size_t n_current() const { return current_labels.size(); }
  std::size_t n_buffered() const { return buffered_labels.size(); }
};

inline void validate_batch(const BatchView& batch) {
  if (batch.n_current() + batch.n_buffered() == 0)
    throw std::invalid_argument("sample_nce: empty batch");
  if (batch.current_inputs.rows() != batch.n_current() ||
      batch.buffered_g.size() != batch.n_buffered() ||
      (batch.n_buffered() > 0 && batch.buffered_inputs.rows() != batch.n_buffered()))
    throw std::invalid_argument("BatchView: inconsistent field sizes");
  const std::set<int> cur_roster(batch.current_classes.begin(), batch.current_classes.end());
  const std::set<int> past_roster(batch.past_classes.begin(), batch.past_classes.end());
  for (int y : batch.current_labels)
    if (!cur_roster.count(y))
      throw std::invalid_argument("BatchView: current label " + std::to_string(y) +
                                  " outside task roster");
  for (std::size_t k = 0; k < batch.n_buffered(); ++k) {
    if (!past_roster.count(batch.buffered_labels[k]))
      throw std::invalid_argument("BatchView: buffered label " +
                                  std::to_string(batch.buffered_labels[k]) +
                                  " outside past-class roster");
    const double g = batch.buffered_g[k];
    if (g == 0.0) throw std::invalid_argument("sample_nce: degenerate proposal weight");
    if (g < 0.0 || g > 1.0 + 1e-9)
      throw std::invalid_argument("BatchView: proposal weight outside (0, 1]");
  }
  if (batch.n_buffered() > 0) {
    std::set<int> distinct(batch.current_labels.begin(), batch.current_labels.end());
    distinct.insert(batch.buffered_labels.begin(), batch.buffered_labels.end());
    if (distinct.size() < 2)
      throw std::invalid_argument("sample_nce: batch with buffered data needs >= 2 classes");
  }
}

struct SampleNceResult {
  Tape::NodeId loss;
  std::map<int, double> per_anchor;  // prototype row -> loss contribution
  std::map<int, double> w_hat;       // prototype row -> partition-function estimate
};

/// Contrastive loss over prototype anchors where the partition function over
/// lost past samples is replaced by an importance-sampled estimate from the
/// buffered half of the batch. Per anchor class i the denominator is
///   sum_{k in (J_i u D_t) n batch} exp(s_ik)
///   + sum_{m != i} sum_{k in J_m n batch} exp(s_ik) / (g_k * |J_m n batch|),
/// folded into one log-sum-exp with the 1/(g |J_m|) factors as log offsets.
/// Current-task anchors have empty J_i.
inline SampleNceResult sample_nce(Tape& tape, const ModelVars& vars, const ModelState& state,
                                  const BatchView& batch) {
  validate_batch(batch);
  const std::size_t n_cur = batch.n_current();
  const std::size_t n_buf = batch.n_buffered();

  const Tensor stacked = vstack(batch.current_inputs, batch.buffered_inputs);
  const auto z = encode_graph(tape, vars, tape.leaf(stacked));
  const auto scores = prototype_scores_graph(tape, vars, state.tau, z);
  const std::size_t num_protos = tape.value(scores).rows();

  // batch columns per buffered class, and per-class in-batch counts
  std::map<int, std::vector<std::size_t>> buffered_cols;
  for (std::size_t k = 0; k < n_buf; ++k)
    buffered_cols[batch.buffered_labels[k]].push_back(n_cur + k);
  std::map<int, std::vector<std::size_t>> current_cols;
  for (std::size_t j = 0; j < n_cur; ++j)
    current_cols[batch.current_labels[j]].push_back(j);

  // anchors: current classes with positives, then buffered classes with positives
  std::vector<std::pair<int, const std::vector<std::size_t>*>> anchors;
  for (const auto& [cls, cols] : current_cols) anchors.emplace_back(cls, &cols);
  for (const auto& [cls, cols] : buffered_cols) anchors.emplace_back(cls, &cols);

  SampleNceResult result;
  std::optional<Tape::NodeId> total;
  for (const auto& [anchor, positives] : anchors) {
    if (anchor < 0 || static_cast<std::size_t>(anchor) >= num_protos)
      throw std::invalid_argument("sample_nce: label " + std::to_string(anchor) +
                                  " has no prototype row");
    std::vector<std::size_t> cols;
    std::vector<double> offsets;
    for (std::size_t j = 0; j < n_cur; ++j) {  // D_t n batch, unweighted
      cols.push_back(j);
      offsets.push_back(0.0);
    }
    for (const auto& [m, mcols] : buffered_cols) {
      if (m == anchor) {
        for (auto c : mcols) {  // J_i n batch, unweighted
          cols.push_back(c);
          offsets.push_back(0.0);
        }
      } else {
        const double log_count = std::log(static_cast<double>(mcols.size()));
        for (auto c : mcols) {
          cols.push_back(c);
          offsets.push_back(-std::log(batch.buffered_g[c - n_cur]) - log_count);
        }
      }
    }
    const auto row = static_cast<std::size_t>(anchor);
    const auto denom = tape.logsumexp(tape.gather_row(scores, row, cols), offsets);
    result.w_hat[anchor] = std::exp(tape.value(denom)[0]);
    for (auto col : *positives) {
      const auto term = tape.sub(denom, tape.entry(scores, row, col));
      result.per_anchor[anchor] += tape.value(term)[0];
      total = total ? tape.add(*total, term) : term;
    }
  }
  result.loss = *total;  // batch is nonempty, so at least one anchor pair exists
  return result;
}

/// Normalized prototype-instance similarity of each sample under the given
/// temperature: row j is softmax_i( normalize(c_i) . z_j / kappa ).
inline Tensor relation_distribution(const ModelState& state, const Tensor& inputs,
                                    double kappa) {
  const Tensor z = encode(state, inputs);
  const Tensor s = prototype_scores(state, z, kappa);  // (K x n)
  const std::size_t K = s.rows(), n = s.cols();
  Tensor q = Tensor::zeros({n, K});
  for (std::size_t j = 0; j < n; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < K; ++i) mx = std::max(mx, s.at(i, j));
    double sum = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
      q.at(j, i) = std::exp(s.at(i, j) - mx);
      sum += q.at(j, i);
    }
    for (std::size_t i = 0; i < K; ++i) q.at(j, i) /= sum;
  }
  return q;
}

/// Relation-distillation loss: cross-entropy of the current model's
/// prototype-instance distribution against the frozen model's,
/// sum_j -q(x_j; frozen, kappa_past) . log q(x_j; current, kappa_cur).
/// Gradients flow only through the current model.
inline Tape::NodeId prd(Tape& tape, const ModelVars& vars, const ModelState& state,
                        const FrozenModel& frozen, const Tensor& inputs, double kappa_cur,
                        double kappa_past) {
  if (frozen.state().num_prototypes() != state.num_prototypes())
    throw std::invalid_argument("prd: prototype count mismatch (" +
                                std::to_string(frozen.state().num_prototypes()) + " vs " +
                                std::to_string(state.num_prototypes()) + ")");
  if (kappa_cur <= 0.0 || kappa_past <= 0.0)
    throw std::invalid_argument("prd: temperatures must be positive");
  const Tensor q_prev = relation_distribution(frozen.state(), inputs, kappa_past);

  const auto z = encode_graph(tape, vars, tape.leaf(inputs));
  const auto s = prototype_scores_graph(tape, vars, state.tau, z, kappa_cur);
  const auto log_q = tape.log_op(tape.softmax_rows(tape.transpose(s)));  // (n x K)
  return tape.scalar_mul(-1.0, tape.sum(tape.mul(tape.leaf(q_prev), log_q)));
}

struct LossBreakdown {
  double sample_nce = 0.0;
  double prd = 0.0;
  double total = 0.0;
  Tape::NodeId total_node = 0;
  std::map<int, double> per_anchor;
  std::map<int, double> w_hat;
};

/// Combined objective: sample_nce + lambda * prd. The frozen model must be
/// present from the second task on and absent on the first; with no frozen
/// model the distillation term is zero.
inline LossBreakdown total_objective(Tape& tape, const ModelVars& vars, const ModelState& state,
                                     const FrozenModel* frozen, const BatchView& batch,
                                     double lambda, double kappa_cur = 0.2,
                                     double kappa_past = 0.1) {
  if (lambda < 0.0) throw std::invalid_argument("total_objective: lambda must be >= 0");
  LossBreakdown out;
  auto nce = sample_nce(tape, vars, state, batch);
  out.sample_nce = tape.value(nce.loss)[0];
  out.per_anchor = std::move(nce.per_anchor);
  out.w_hat = std::move(nce.w_hat);
  out.total_node = nce.loss;
  if (frozen != nullptr) {
    const Tensor stacked = vstack(batch.current_inputs, batch.buffered_inputs);
    const auto prd_node = prd(tape, vars, state, *frozen, stacked, kappa_cur, kappa_past);
    out.prd = tape.value(prd_node)[0];
    if (lambda > 0.0)
      out.total_node = tape.add(nce.loss, tape.scalar_mul(lambda, prd_node));
  }
  out.total = tape.value(out.total_node)[0];
  return out;
}

}  // namespace cclis
