#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace semiq {

// Value iteration or relative value iteration did not reach its tolerance.
class ConvergenceFailure : public std::runtime_error {
 public:
  ConvergenceFailure(const std::string& what, double last_residual)
      : std::runtime_error(what), last_residual_(last_residual) {}
  double last_residual() const { return last_residual_; }

 private:
  double last_residual_;
};

// The measured contraction factor of an operator was not below one.
class NotAContraction : public std::runtime_error {
 public:
  NotAContraction(const std::string& what, double beta_hat)
      : std::runtime_error(what), beta_hat_(beta_hat) {}
  double beta_hat() const { return beta_hat_; }

 private:
  double beta_hat_;
};

// A non-finite or exploding iterate. replica_id is -1 until a replicated
// run attaches it.
class NumericalDivergence : public std::runtime_error {
 public:
  NumericalDivergence(const std::string& what, std::int64_t t, int replica_id = -1)
      : std::runtime_error(what), t_(t), replica_id_(replica_id) {}
  std::int64_t t() const { return t_; }
  int replica_id() const { return replica_id_; }

 private:
  std::int64_t t_;
  int replica_id_;
};

// Q* sits on a boundary of the greedy-policy partition (zero argmax margin).
class DegenerateInstance : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The instance violates a structural requirement (e.g. a reducible chain).
class InvalidInstance : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IdentityViolation : public std::runtime_error {
 public:
  IdentityViolation(const std::string& what, double max_residual)
      : std::runtime_error(what), max_residual_(max_residual) {}
  double max_residual() const { return max_residual_; }

 private:
  double max_residual_;
};

class BoundViolation : public std::runtime_error {
 public:
  BoundViolation(const std::string& what, std::int64_t witness_k)
      : std::runtime_error(what), witness_k_(witness_k) {}
  std::int64_t witness_k() const { return witness_k_; }

 private:
  std::int64_t witness_k_;
};

// An assumption check failed; report holds the JSON report with witnesses.
class AssumptionViolation : public std::runtime_error {
 public:
  AssumptionViolation(const std::string& what, std::string report)
      : std::runtime_error(what), report_(std::move(report)) {}
  const std::string& report() const { return report_; }

 private:
  std::string report_;
};

class InvalidWindow : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace semiq
