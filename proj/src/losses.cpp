#include "mecq/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>

#include "mecq/errors.hpp"

namespace mecq::losses {

ad::Var cross_entropy(ad::Var logits, const std::vector<int>& labels) {
  if (logits.value().rank() != 2) throw ShapeError("cross_entropy: logits must be (batch, classes)");
  const Index n = logits.shape()[0];
  const Index c = logits.shape()[1];
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("cross_entropy: label count != batch size");
  Tensor one_hot({n, c});
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw DataError("cross_entropy: label " + std::to_string(y) + " out of range");
    one_hot.matrix()(i, y) = -1.0 / static_cast<double>(n);
  }
  ad::Tape& tape = *logits.tape();
  return ad::reduce_sum(ad::mul(ad::log_softmax(logits), tape.constant(std::move(one_hot))));
}

ad::Var kd_kl(ad::Var student_logits, const Tensor& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape || teacher_logits.rank() != 2)
    throw ShapeError("kd_kl: student " + shape_str(student_logits.shape()) + " vs teacher " +
                     shape_str(teacher_logits.shape));
  const Index n = teacher_logits.shape[0];
  // p_t and sum p_t log p_t are constants.
  RowMatrix log_pt = teacher_logits.matrix();
  for (Index r = 0; r < n; ++r) {
    const double mx = log_pt.row(r).maxCoeff();
    const double lse = mx + std::log((log_pt.row(r).array() - mx).exp().sum());
    log_pt.row(r).array() -= lse;
  }
  const RowMatrix pt = log_pt.array().exp();
  const double entropy_term = (pt.array() * log_pt.array()).sum() / static_cast<double>(n);
  Tensor weights(teacher_logits.shape);
  weights.matrix() = -pt / static_cast<double>(n);
  ad::Tape& tape = *student_logits.tape();
  const ad::Var cross = ad::reduce_sum(ad::mul(ad::log_softmax(student_logits), tape.constant(std::move(weights))));
  return ad::add_scalar(cross, entropy_term);
}

double lambda_at(const LambdaSchedule& sched, double epoch) {
  if (sched.warmup_epochs <= 0) throw ConfigError("lambda schedule: E_warmup must be positive");
  if (!(sched.strength > 0.0)) throw ConfigError("lambda schedule: str must be positive");
  if (epoch < 0.0) throw ConfigError("lambda schedule: epoch must be non-negative");
  const double e = static_cast<double>(sched.warmup_epochs);
  const double beta = std::clamp(epoch, 0.0, e);
  const double r = beta / e;
  return sched.strength * std::exp(-5.0 * (1.0 - r * r));
}

TotalLoss total_loss(ad::Var logits, ad::Var features, const Supervision& supervision, double lambda,
                     const MecTerm& mec_term) {
  if (lambda < 0.0) throw ConfigError("total_loss: lambda must be non-negative");
  TotalLoss out;
  ad::Var task;
  if (const auto* labels = std::get_if<Labels>(&supervision)) {
    task = cross_entropy(logits, labels->y);
    out.report.setting = Setting::A;
  } else {
    task = kd_kl(logits, std::get<Teacher>(supervision).logits);
    out.report.setting = Setting::B;
  }
  out.report.task_loss = task.item();
  out.report.lambda = lambda;
  out.total = task;
  if (mec_term.config) {
    out.report.sign = mec_term.config->maximize_entropy ? -1.0 : 1.0;
    if (lambda > 0.0) {
      const mec::MecLoss m = mec::mec_loss(ad::transpose(features), *mec_term.config, mec_term.gate_weights);
      out.report.mec_raw = m.value.item();
      out.mec_converged = m.converged;
      out.total = ad::add(task, ad::scale(m.value, out.report.sign * lambda));
    }
  }
  out.report.total = out.total.item();
  return out;
}

void write_report_header(std::ostream& out) { out << "step,epoch,task,mec_raw,lambda,total\n"; }

void write_report_row(std::ostream& out, long step, int epoch, const LossReport& r) {
  out << step << ',' << epoch << ',' << std::setprecision(17) << r.task_loss << ',' << r.mec_raw << ','
      << r.lambda << ',' << r.total << '\n';
}

}  // namespace mecq::losses
