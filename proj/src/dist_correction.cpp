#include "pdquant/dist_correction.hpp"

#include <cmath>

#include "pdquant/log.hpp"

namespace pdq {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Walks the unit's layers; at every batchnorm, hands the current
/// activation (the BN input) to `on_bn` before applying the layer.
template <typename Fn>
Tensor prefix_walk(const ModelGraph& m, int unit, const Tensor& a, Fn on_bn) {
  Tensor cur = a;
  for (const Layer& l : m.unit_layers(unit)) {
    if (l.kind == LayerKind::BatchNorm) on_bn(l, cur);
    if (l.kind == LayerKind::ResidualAdd) {
      cur = add(cur, a);
    } else {
      cur = layer_apply(l, cur);
    }
  }
  return cur;
}

/// Tape-aware Eq-style objective; also reports the raw stat residual.
Tensor build_objective(const ModelGraph& m, int unit, const Tensor& a_dc, const Tensor& a_fp,
                       float lambda_c, double* stat_residual) {
  Tensor stat;
  prefix_walk(m, unit, a_dc, [&](const Layer& bn, const Tensor& bn_in) {
    Tensor mu_hat = channel_mean(bn_in);
    Tensor sd_hat = channel_std(bn_in);
    Tensor sd_target = sqrt(bn.bn_var);
    Tensor dm = sub(mu_hat, bn.bn_mean);
    Tensor ds = sub(sd_hat, sd_target);
    Tensor term = add(sum_all(mul(dm, dm)), sum_all(mul(ds, ds)));
    stat = stat.defined() ? add(stat, term) : term;
  });
  if (stat_residual != nullptr) *stat_residual = stat.defined() ? stat.item() : 0.0;
  Tensor d = sub(a_dc, a_fp);
  Tensor anchor = sum_all(mul(d, d));
  return stat.defined() ? add(mul(stat, lambda_c), anchor) : anchor;
}

}  // namespace

std::vector<std::pair<Tensor, Tensor>> collect_bn_inputs(const ModelGraph& m, int unit,
                                                         const Tensor& a) {
  std::vector<std::pair<Tensor, Tensor>> stats;
  prefix_walk(m, unit, a, [&](const Layer&, const Tensor& bn_in) {
    stats.emplace_back(channel_mean(bn_in), channel_std(bn_in));
  });
  return stats;
}

CorrectionState make_correction_state(const Tensor& a_fp, float lambda_c, float lr, int steps) {
  require(a_fp.defined(), "make_correction_state: undefined activation");
  require(lambda_c >= 0.0f, "make_correction_state: lambda_c must be >= 0");
  require(lr > 0.0f && steps >= 0, "make_correction_state: bad lr/steps");
  CorrectionState st;
  st.a_dc = a_fp.clone();
  st.a_fp = a_fp;
  st.lambda_c = lambda_c;
  st.lr = lr;
  st.steps = steps;
  return st;
}

double dc_objective(const ModelGraph& m, int unit, const Tensor& a, const Tensor& a_fp,
                    float lambda_c) {
  return build_objective(m, unit, a, a_fp, lambda_c, nullptr).item();
}

DcResult correct_distribution(const ModelGraph& m, int unit, CorrectionState state) {
  require(state.a_dc.defined() && state.a_fp.defined(), "correct_distribution: undefined state");
  require(state.a_dc.shape() == state.a_fp.shape(), "correct_distribution: shape mismatch");

  DcResult res;

  bool has_bn = false;
  for (const Layer& l : m.unit_layers(unit)) has_bn = has_bn || l.kind == LayerKind::BatchNorm;
  if (!has_bn || state.lambda_c == 0.0f || state.steps == 0) {
    // No statistics to match (or matching disabled): the anchor's optimum
    // is the original activation, exactly.
    res.corrected = state.a_fp.clone();
    res.objective = {0.0};
    return res;
  }

  Tensor a = state.a_dc;
  a.set_requires_grad(true);

  try {
    for (int step = 0; step < state.steps; ++step) {
      double stat = 0.0;
      Tensor loss;
      {
        GradTape tape;
        loss = build_objective(m, unit, a, state.a_fp, state.lambda_c, &stat);
        tape.backward(loss);
      }
      res.objective.push_back(loss.item());
      if (step == 0) res.stat_initial = stat;
      auto grad = a.grad();
      float* pa = a.data();
      for (int64_t i = 0; i < a.size(); ++i) pa[i] -= state.lr * grad[static_cast<size_t>(i)];
      a.zero_grad();
    }
    double stat_end = 0.0;
    Tensor final_loss = build_objective(m, unit, a, state.a_fp, state.lambda_c, &stat_end);
    res.objective.push_back(final_loss.item());
    res.stat_final = stat_end;
  } catch (const NonFiniteError& e) {
    log_warn(std::string("distribution correction diverged, reverting: ") + e.what());
    res.corrected = state.a_fp.clone();
    res.reverted = true;
    return res;
  }

  if (!res.objective.empty() && res.objective.back() > res.objective.front()) {
    log_warn("distribution correction did not improve the objective, reverting");
    res.corrected = state.a_fp.clone();
    res.reverted = true;
    return res;
  }

  a.set_requires_grad(false);
  res.corrected = a;
  return res;
}

}  // namespace pdq
