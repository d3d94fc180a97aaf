#pragma once

// Confident sub-sequence sampling, the variational loss and its exact
// enumeration counterpart, and the Adam training loop.

#include "confdec/data.hpp"
#include "confdec/model.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace confdec {

enum class Label : std::uint8_t { Keep, Skip };

enum class Objective {
    /// Sub-sequence sampling with the Monte Carlo bound.
    Variational,
    /// Plain teacher-forced likelihood of the full reference.
    Likelihood,
};

const char* to_string(Objective o);
Objective parse_objective(const std::string& s);

struct TrainConfig {
    int K = 8;
    double learning_rate = 5e-4;
    std::size_t batch_size = 1;
    std::size_t max_epochs = 20;
    std::size_t patience = 3;
    bool null_mode = false;
    Objective objective = Objective::Variational;
    /// Leading epochs trained with the likelihood objective before switching to `objective`.
    std::size_t warmup_epochs = 0;
    /// Cost per skipped position added to H, i.e. log P(y | z, x) = -skip_penalty * #skips.
    /// Zero reproduces the bound exactly as written.
    double skip_penalty = 0.0;
    /// Adds the -log P_B(z) term.
    bool train_base_lm = true;
    /// Adds the -log P^(z) term and lets kappa move; otherwise kappa stays 0.
    bool calibration = true;
    double input_dropout = 0.0;
    double recurrent_dropout = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Keep-probability per position: C^rho / (C^rho + gamma), C floored at 1e-12.
double keep_probability(double c, double rho, double gamma);

/// z and the z-to-y index map induced by a labeling. In null mode the first position of
/// every skip run becomes <null> and the rest of the run is dropped.
struct Induced {
    std::vector<int> z;
    std::vector<int> iota;
};
Induced induce_subsequence(std::span<const int> y, std::span<const Label> labels, bool null_mode, int null_id);

struct SubsequenceSample {
    std::vector<Label> labels;
    std::vector<int> z_tokens;
    std::vector<int> iota;
    Var log_q;
    [[nodiscard]] double log_q_value() const { return log_q.scalar(); }
};

/// Draws keep/skip per position from the confidences. The last position is always kept
/// and contributes nothing to log Q. With `forced`, the given labels are scored instead.
SubsequenceSample sample_subsequence(std::span<const Var> confidences, std::span<const int> y, Var rho, Var log_gamma,
                                     bool null_mode, int null_id, Rng& rng,
                                     const std::vector<Label>* forced = nullptr);

/// Teacher-forced scoring of one target sequence.
struct SequenceScore {
    Var log_p;        // sum of log P~(z_t)
    Var log_p_cal;    // sum of log P^(z_t)
    Var log_p_base;   // sum of log P_B(z_t)
    std::vector<Var> confidences;  // C_t(z_t)
    std::vector<StepOutput> steps;
};

/// Throws std::out_of_range for ids outside the vocabulary and invalid_argument when z is empty.
SequenceScore sequence_log_prob(Session& session, const EncoderState& enc, std::span<const int> z);

/// Base LM alone, with the given per-position scores fed in as stop-gradients.
Var base_lm_log_prob(Session& session, std::span<const int> z, std::span<const double> scores);

struct VbOptions {
    int K = 8;
    bool null_mode = false;
    bool base_lm_term = true;
    bool calibration_term = true;
    double skip_penalty = 0.0;
    /// Replaces sampling: sample k uses forced_labels[k % size].
    std::vector<std::vector<Label>> forced_labels;
    /// Degenerate Q: z = y and log Q = 0.
    bool keep_all = false;
};

struct VbLoss {
    /// Mean over samples. Its value equals the Monte Carlo objective estimate; its gradient
    /// is the score-function estimator.
    Var loss;
    /// The bound part alone: mean of H_k + SG(H_k) (log Q_k - SG(log Q_k)).
    Var bound;
    double bound_value = 0.0;
    double base_value = 0.0;         // mean of -log P_B(z_k)
    double calibration_value = 0.0;  // mean of -log P^(z_k)
    std::vector<SubsequenceSample> samples;
};

VbLoss vb_loss(Session& session, const EncodedExample& ex, const VbOptions& opts, Rng& rng);

/// -log P(y) plus the optional base LM and calibration terms on the full reference.
Var likelihood_loss(Session& session, const EncodedExample& ex, bool base_lm_term, bool calibration_term);

struct ExactObjective {
    double bound = 0.0;              // E_Q[log Q - log P(z) + skip_penalty #skips]
    double base_term = 0.0;          // E_Q[-log P_B(z)]
    double calibration_term = 0.0;   // E_Q[-log P^(z)]
    double log_evidence = 0.0;           // log sum over labelings of P(z) exp(-skip_penalty #skips)
    double log_evidence_distinct = 0.0;  // log sum over distinct z of P(z), zero penalty only
    std::size_t labelings = 0;
    /// Per labeling, in mask order: Q(z) and -log P_B(z) - log P^(z).
    std::vector<double> q;
    std::vector<double> aux;
    [[nodiscard]] double total(bool base, bool calibration) const {
        return bound + (base ? base_term : 0.0) + (calibration ? calibration_term : 0.0);
    }
};

inline constexpr std::size_t kMaxEnumerationLength = 12;

struct ExactOptions {
    /// Stop-gradient values, one list per forward pass (the confidence pass first, then one
    /// per distinct z in first-use order). Recorded into `record_sg`, or replayed from
    /// `replay_sg` so finite differences treat them as constants.
    std::vector<std::vector<Tensor>>* record_sg = nullptr;
    const std::vector<std::vector<Tensor>>* replay_sg = nullptr;
    double skip_penalty = 0.0;
};

/// Sum over all labelings of the reference. Throws std::invalid_argument when the target
/// is longer than kMaxEnumerationLength.
ExactObjective exact_vb_objective(const Model& model, const EncodedExample& ex, bool null_mode,
                                  const ExactOptions& opts = {});

// ---- optimization ---------------------------------------------------------

class Adam {
public:
    Adam(double lr, double beta1, double beta2, double epsilon) : lr_(lr), b1_(beta1), b2_(beta2), eps_(epsilon) {}
    /// One update; `frozen[i]` skips tensor i.
    void step(std::span<Tensor* const> params, std::span<const Tensor> grads, std::span<const bool> frozen = {});
    [[nodiscard]] std::uint64_t steps() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EpochRecord {
    std::size_t epoch = 0;
    Objective objective = Objective::Variational;
    double train_loss = 0.0;
    double valid_loss = 0.0;
    ConfidenceParams confidence;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_valid_loss = 0.0;
    std::uint64_t updates = 0;
    bool stopped_early = false;
};

std::ostream& operator<<(std::ostream& os, const EpochRecord& r);

/// Loss of one example under `objective`, built on `session`.
Var example_loss(Session& session, const EncodedExample& ex, const TrainConfig& cfg, Objective objective, Rng& rng);

/// Mean loss over a split with dropout off and per-example rngs derived from `seed`.
double evaluate_loss(const Model& model, std::span<const EncodedExample> data, const TrainConfig& cfg,
                     Objective objective, std::uint64_t seed);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam with early stopping on validation loss; the best parameters are restored at the end.
/// Early stopping restarts when the warm-up ends, since the two losses are not comparable.
/// Throws TrainingDiverged on a non-finite loss and std::invalid_argument for empty splits.
TrainReport fit(Model& model, std::span<const EncodedExample> train, std::span<const EncodedExample> valid,
                const TrainConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace confdec
