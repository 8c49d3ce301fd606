#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "modt/backbone.hpp"
#include "modt/diffcore/finite_diff.hpp"
#include "modt/regions.hpp"
#include "modt/trajmodel.hpp"
#include "modt/window.hpp"

namespace fixtures {

inline modt::backbone::ModelConfig tiny_config(modt::Variant v, int layers = 2, int heads = 2, int embed = 16,
                                               int k = 4) {
  modt::backbone::ModelConfig c;
  c.num_layers = layers;
  c.num_heads = heads;
  c.embed_dim = embed;
  c.context_len = k;
  c.variant = v;
  c.dropout = 0.1;
  c.state_dim = 4;
  c.action_dim = 2;
  c.region_bins = 3;
  return c;
}

/// Random window in model units; actions in [-1, 1] with matching region codes.
inline modt::ContextWindow random_window(modt::Variant v, std::size_t steps, std::uint64_t seed, int bins = 3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  modt::TrajectorySegment seg;
  seg.states = modt::Rows(steps, 4);
  seg.actions = modt::Rows(steps, 2);
  for (std::size_t t = 0; t < steps; ++t) {
    seg.returns.push_back(n(rng));
    for (std::size_t c = 0; c < 4; ++c) seg.states.at(t, c) = n(rng);
    for (std::size_t c = 0; c < 2; ++c) seg.actions.at(t, c) = u(rng);
  }
  if (v == modt::Variant::motrdt) {
    modt::regions::RegionSpec spec{bins, {-1.0, -1.0}, {1.0, 1.0}};
    modt::Rows codes(0, spec.code_length());
    for (std::size_t t = 0; t < steps; ++t) codes.push_row(modt::regions::encode_action(seg.actions.row(t), spec));
    seg.regions = codes;
  }
  return modt::layout_tokens(std::move(seg), v);
}

/// Scalarized loss of `model` on `windows` in eval mode.
template <class T>
T scalar_loss(modt::traj::DecisionModel<T>& model, const std::vector<modt::ContextWindow>& windows,
              const modt::traj::LossWeights& w, bool record = false) {
  modt::diff::Tape<T> tape(record);
  auto out = model.encode(tape, windows, modt::backbone::Mode::eval);
  auto terms = modt::traj::compute_losses(tape, model, out, windows);
  return modt::traj::scalarize(tape, terms, w, model.config().variant).item();
}

struct GradCheck {
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  std::size_t rechecked = 0;  // coordinates compared at more than one step
};

/// Compares backward gradients of the scalarized loss with central
/// differences for every value of every parameter. A coordinate whose error
/// exceeds tol/10 is compared again at steps 10h, h/100 and h/1000 and
/// one-sided, keeping the closest estimate.
inline GradCheck check_all_gradients(modt::traj::DecisionModel<double>& model,
                                     const std::vector<modt::ContextWindow>& windows,
                                     const modt::traj::LossWeights& w, double h, double tol = 1e-4) {
  {
    modt::diff::Tape<double> tape;
    auto out = model.encode(tape, windows, modt::backbone::Mode::eval);
    auto terms = modt::traj::compute_losses(tape, model, out, windows);
    auto& loss = modt::traj::scalarize(tape, terms, w, model.config().variant);
    model.parameters().zero_grad();
    tape.backward(loss);
  }
  GradCheck result;
  auto f = [&] { return scalar_loss(model, windows, w); };
  for (auto& [name, p] : model.parameters()) {
    const auto analytic = p.grad;
    auto numeric = modt::diff::finite_diff_grad<double>(f, p.values, h);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      ++result.checked;
      double e = modt::diff::relative_error(analytic[i], numeric[i]);
      if (e > 0.1 * tol) {
        // Tiny gradients lose digits to roundoff at step h, and a ReLU
        // switching inside +-h breaks the central difference; other steps and
        // the one-sided difference away from the switch see a smooth function.
        ++result.rechecked;
        const double x = p.values[i];
        const double f0 = f();
        for (double step : {h, 10.0 * h, h / 100.0, h / 1000.0}) {
          p.values[i] = x + step;
          const double fp = f();
          p.values[i] = x - step;
          const double fm = f();
          p.values[i] = x;
          for (double estimate : {(fp - fm) / (2.0 * step), (fp - f0) / step, (f0 - fm) / step}) {
            e = std::min(e, modt::diff::relative_error(analytic[i], estimate));
          }
        }
      }
      if (e > result.worst) {
        result.worst = e;
        result.worst_name = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace fixtures
