#pragma once

// Beam search with calibrated scoring, length penalty and <null> thresholding;
// teacher-forced score tracing; the source-zeroing sensitivity probe.

#include "confdec/data.hpp"
#include "confdec/model.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace confdec {

struct DecodeConfig {
    std::size_t beam_size = 8;
    std::size_t max_len = 40;
    double length_penalty_alpha = 0.0;
    /// Tokens whose confidence falls below this are emitted as <null>.
    std::optional<double> null_threshold;
    bool use_calibration = true;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Per-step quantities of the chosen continuation.
struct DecoderTrace {
    int token = -1;          // the ranked token
    int emitted = -1;        // token or <null>
    std::vector<double> alpha;
    Vector attention, hidden, context;
    double attn_score = 0.0;
    double attn_tilde = 0.0;
    double p_gen = 1.0;
    double base_prob = 0.0;
    double confidence = 0.0;
    double log_prob = 0.0;   // step score contribution
};

struct DecodeResult {
    std::vector<int> tokens;     // nulls and EOS removed
    std::vector<int> emission;   // with nulls, EOS removed
    std::vector<DecoderTrace> trace;
    double score = 0.0;          // summed step log scores
    double ranking_score = 0.0;  // score / lp
    bool finished = false;       // false when max_len forced the end
};

/// Called before every step; returning true replaces the encoder states with zeros for that step.
using SourceMask = std::function<bool(std::size_t step)>;

/// Throws std::invalid_argument when a null threshold is set but the model has no <null> id.
DecodeResult beam_search(const Model& model, std::span<const int> source, const DecodeConfig& cfg,
                         const SourceMask& zero_source = {});

/// Removes every <null>. Idempotent.
std::vector<int> strip_nulls(std::span<const int> tokens, int null_id);

struct TraceRow {
    int token = -1;
    double score = 0.0;       // A~ with copy, A otherwise
    double attn_score = 0.0;  // A
    double p_gen = 1.0;
    double base_prob = 0.0;   // P_B(token)
    double confidence = 0.0;  // score + (1 - score) P_B
    double prob = 0.0;        // P~(token)
};

/// Teacher-forced rows, one per target token.
std::vector<TraceRow> trace(const Model& model, std::span<const int> source, std::span<const int> target);

struct ProbeResult {
    double p = 0.0;
    double mean_changed = 0.0;
    double stddev = 0.0;
    std::vector<double> per_trial;
};

/// Greedy decoding where every step zeroes the encoder with probability p. The uniform
/// draws depend only on (seed, trial, example, step), so curves over p are coupled.
ProbeResult source_sensitivity_probe(const Model& model, std::span<const EncodedExample> data, double p,
                                     std::size_t trials, const DecodeConfig& cfg);

}  // namespace confdec
