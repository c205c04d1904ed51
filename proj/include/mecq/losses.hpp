#pragma once

#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include "mecq/autodiff.hpp"
#include "mecq/mec.hpp"

namespace mecq::losses {

// Mean over rows of -log softmax(logits)[label]. logits is (batch, classes).
ad::Var cross_entropy(ad::Var logits, const std::vector<int>& labels);

// Mean over rows of KL(softmax(teacher) || softmax(student)) at temperature 1.
// The teacher is a plain tensor, so no gradient can reach it.
ad::Var kd_kl(ad::Var student_logits, const Tensor& teacher_logits);

struct LambdaSchedule {
  double strength = 5.0;  // str
  int warmup_epochs = 50;
};

// str * exp(-5 (1 - (beta / E)^2)), beta = clip(t, 0, E).
double lambda_at(const LambdaSchedule& sched, double epoch);

enum class Setting { A, B };

struct LossReport {
  double task_loss = 0.0;
  double mec_raw = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  double sign = -1.0;
  Setting setting = Setting::A;
};

struct Labels {
  std::vector<int> y;
};
struct Teacher {
  Tensor logits;
};
using Supervision = std::variant<Labels, Teacher>;

// MEC term inputs. When `config` is null the MEC term is skipped.
struct MecTerm {
  const mec::MecConfig* config = nullptr;
  ad::Var gate_weights;
};

struct TotalLoss {
  ad::Var total;
  LossReport report;
  bool mec_converged = true;
};

// task(Z_o) + sign * lambda * L_MEC(Z_b), sign = -1 when maximizing entropy.
// features is the backbone output as (batch, d); it is transposed to the d x m
// orientation of the coding length.
TotalLoss total_loss(ad::Var logits, ad::Var features, const Supervision& supervision, double lambda,
                     const MecTerm& mec_term);

// CSV streaming of per-step reports.
void write_report_header(std::ostream& out);
void write_report_row(std::ostream& out, long step, int epoch, const LossReport& r);

}  // namespace mecq::losses
