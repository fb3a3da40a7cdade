#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "m2m/autograd.hpp"
#include "m2m/params.hpp"

namespace m2m {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;

  bool passed(double tol) const { return max_rel_err < tol; }
};

// |a - b| / max(|a|, |b|, 1e-8)
inline double gradcheck_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Builds a scalar loss from parameters bound on a fresh tape.
using LossBuilder = std::function<Var(Binder&)>;

namespace detail {
inline double evaluate_loss(const LossBuilder& f, const ParamStore& params) {
  Tape tape;
  Binder bind(tape, params);
  double v;
  try {
    v = f(bind).value().item();
  } catch (const ContractError& e) {
    throw GradCheckAborted(std::string("loss evaluation failed: ") + e.what());
  }
  if (!std::isfinite(v)) throw GradCheckAborted("loss evaluation is not finite");
  return v;
}
}  // namespace detail

// Central differences (f(θ+h e_i) - f(θ-h e_i)) / 2h on every entry of every
// parameter, compared against the tape's adjoints.
inline GradCheckReport finite_diff_check(const LossBuilder& f, const ParamStore& params,
                                         double h = 1e-5) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check step must be positive");
  Tape tape;
  Binder bind(tape, params);
  Var loss;
  try {
    loss = f(bind);
  } catch (const ContractError& e) {
    throw GradCheckAborted(std::string("loss evaluation failed: ") + e.what());
  }
  if (!std::isfinite(loss.value().item())) throw GradCheckAborted("loss is not finite");
  const Adjoints adj = backward(loss);

  GradCheckReport report;
  ParamStore probe = params;
  for (const auto& [name, value] : params) {
    const Tensor analytic = adj.contains(name) ? adj.at(name) : Tensor::zeros(value.dims());
    Tensor& slot = probe.at(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      slot[i] = orig + h;
      const double fp = detail::evaluate_loss(f, probe);
      slot[i] = orig - h;
      const double fm = detail::evaluate_loss(f, probe);
      slot[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = gradcheck_rel_err(analytic[i], numeric);
      ++report.entries_checked;
      if (err > report.max_rel_err || report.entries_checked == 1) {
        report.max_rel_err = std::max(report.max_rel_err, err);
        report.worst_param = name;
        report.worst_index = i;
        report.worst_analytic = analytic[i];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

// Single-tensor form: f receives θ bound as parameter "theta".
inline GradCheckReport finite_diff_check(const std::function<Var(Binder&, const Var&)>& f,
                                         const Tensor& theta, double h = 1e-5) {
  ParamStore store;
  store.add("theta", theta);
  return finite_diff_check([&](Binder& b) { return f(b, b("theta")); }, store, h);
}

}  // namespace m2m
