#pragma once

// Encoder-decoder with bilinear attention, a copy gate, and the
// confidence machinery: attention score, base language model, confidence
// score and calibrated output distribution.

#include "confdec/numerics.hpp"
#include "confdec/rng.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace confdec {

enum class AttentionMode {
    /// Attention weights sum to one; the decoder RNN reads the previous attention vector.
    Baseline,
    /// Attention weights sum to less than one; the decoder RNN sees target tokens only.
    Confident,
};

enum class ConfidenceSource {
    /// C = A + (1 - A) P_B.
    AttentionScore,
    /// C = P~(y), the model's own output probability (ablation).
    Probability,
};

const char* to_string(AttentionMode m);
const char* to_string(ConfidenceSource s);
AttentionMode parse_attention_mode(const std::string& s);
ConfidenceSource parse_confidence_source(const std::string& s);

struct SpecialTokens {
    int bos = 1;
    int eos = 2;
    /// -1 when the vocabulary has no <null> token.
    int null = 4;
};

struct ModelConfig {
    int vocab_size = 0;
    int embed_dim = 32;
    int encoder_hidden = 32;
    int decoder_hidden = 32;
    int base_lm_hidden = 32;
    AttentionMode mode = AttentionMode::Confident;
    bool copy_enabled = true;
    ConfidenceSource confidence_source = ConfidenceSource::AttentionScore;
    SpecialTokens tokens;
    std::uint64_t seed = 1;

    /// Throws std::invalid_argument on inconsistent settings.
    void validate() const;
};

/// Scalar confidence parameters rho, gamma (stored as log gamma) and kappa.
struct ConfidenceParams {
    double rho = 0.0;
    double gamma = 1.0;
    double kappa = 0.0;
};

/// All trainable tensors. Matrices are dense Eigen types owned by value.
struct Parameters {
    Tensor embedding;       // |V| x d, shared by encoder input, decoder input and output
    Tensor src_embedding;   // d x 1, the <src> embedding fed to the base LM
    Tensor enc_fwd_w, enc_fwd_b;
    Tensor enc_bwd_w, enc_bwd_b;
    Tensor dec_w, dec_b;
    Tensor attn_w;          // H x 2H (confident) or H x H (baseline)
    Tensor gen_w, gen_b;    // copy gate over [v; h; e_prev]
    Tensor lm_w, lm_b;      // base LM cell
    Tensor lm_out_w, lm_out_b;
    Tensor rho, log_gamma, kappa;  // 1 x 1 each

    /// Fixed-order (name, tensor) list; the order defines checkpoint layout and leaf order.
    std::vector<std::pair<std::string, Tensor*>> named();
    std::vector<std::pair<std::string, const Tensor*>> named() const;
    std::vector<Tensor*> tensors();
    [[nodiscard]] std::size_t count() const;
    [[nodiscard]] ConfidenceParams confidence() const;

    static Parameters initialize(const ModelConfig& cfg);
};

/// Parameters registered as graph leaves, in Parameters::named() order.
struct BoundParameters {
    Var embedding, src_embedding;
    Var enc_fwd_w, enc_fwd_b, enc_bwd_w, enc_bwd_b;
    Var dec_w, dec_b, attn_w, gen_w, gen_b;
    Var lm_w, lm_b, lm_out_w, lm_out_b;
    Var rho, log_gamma, kappa;
    std::vector<Var> leaves;

    static BoundParameters bind(Graph& g, const Parameters& p);
    static BoundParameters from_leaves(std::span<const Var> leaves);
};

class Model {
public:
    explicit Model(ModelConfig cfg);
    Model(ModelConfig cfg, Parameters params);

    [[nodiscard]] const ModelConfig& config() const { return config_; }
    [[nodiscard]] const Parameters& params() const { return params_; }
    Parameters& params() { return params_; }

private:
    ModelConfig config_;
    Parameters params_;
};

struct EncoderState {
    Var states;     // H x S, column s is s_s
    Var states_t;   // S x H
    std::vector<int> source_ids;
    [[nodiscard]] Eigen::Index length() const { return static_cast<Eigen::Index>(source_ids.size()); }
};

/// Recurrent state carried between decoder steps.
struct StepState {
    Var h, c;           // decoder cell
    Var attention;      // a_{t-1}
    Var g, gc;          // base LM cell
    Var score;          // A_{t-1} (or A~_{t-1} with copy), fed to the base LM through stop-gradient
};

/// Everything computed at one decoder step.
struct StepOutput {
    StepState next;
    Var alpha;          // S x 1
    Var attention;      // a_t
    Var hidden;         // h_t
    Var context;        // v_t = a_t + h_t
    Var p_gen;
    Var attn_score;     // A_t
    Var attn_tilde;     // A~_t
    Var score;          // the score used inside the confidence (A~_t with copy, else A_t)
    Var gen_dist;       // P
    Var mixed_dist;     // P~
    Var base_dist;      // P_B
};

struct DropoutSpec {
    double input = 0.0;
    double recurrent = 0.0;
    Rng* rng = nullptr;
    [[nodiscard]] bool active() const { return rng != nullptr && (input > 0.0 || recurrent > 0.0); }
};

struct StepOptions {
    /// Test hook: overrides the copy gate.
    std::optional<double> force_p_gen;
};

/// Binds a model into one graph and builds encoder/decoder computations on it.
class Session {
public:
    Session(Graph& g, const Model& model, DropoutSpec dropout = {});
    Session(Graph& g, const ModelConfig& cfg, BoundParameters bound, DropoutSpec dropout = {});

    [[nodiscard]] Graph& graph() const { return *graph_; }
    [[nodiscard]] const ModelConfig& config() const { return cfg_; }
    [[nodiscard]] const BoundParameters& bound() const { return p_; }

    /// Throws std::invalid_argument for an empty source.
    EncoderState encode(std::span<const int> source_ids);
    /// Same positions, all vectors set to zero.
    EncoderState zeroed(const EncoderState& enc);

    StepState initial_state();
    StepOutput step(const StepState& prev, int prev_token, const EncoderState& enc, StepOptions opts = {});

    struct BaseLmOutput {
        Var g, gc;
        Var dist;  // P_B over the vocabulary
    };
    /// Base LM recurrence alone. The input embedding is blended toward <src> by SG(prev_score).
    BaseLmOutput base_lm_step(Var g_prev, Var gc_prev, int prev_token, Var prev_score);

    /// C(y) for every vocabulary entry at this step.
    Var confidence_vector(const StepOutput& out);
    /// C(y) for one token.
    Var token_confidence(const StepOutput& out, int token);

private:
    std::pair<Var, Var> lstm(Var w, Var b, Var x, Var h, Var c);
    Var input_dropout(Var x);
    Var recurrent_dropout(Var h);

    Graph* graph_;
    ModelConfig cfg_;
    BoundParameters p_;
    DropoutSpec dropout_;
};

// ---- confidence math --------------------------------------------------

inline constexpr double kScoreEpsilon = 1e-12;
inline constexpr double kConfidenceFloor = 1e-12;

struct AttentionScore {
    Var score;   // A_t
    Var tilde;   // A~_t = p_gen A_t + (1 - p_gen)
};

/// A = |a| / (0.5 (|a| + |h| + |v|) + eps); zero when every norm is zero.
AttentionScore attention_score(Var a, Var h, Var v, Var p_gen);

/// C = A + (1 - A) P_B. P_B may be a vector, giving C per vocabulary entry.
Var confidence(Var score, Var base_prob);

struct Calibrated {
    Var probs;
    Var log_probs;
};

/// P^(y) proportional to SG(P~(y)) SG(C(y))^kappa, normalized. Only kappa receives gradient.
Calibrated calibrate(Var mixed, Var conf, Var kappa);

double length_penalty(std::size_t length, double alpha);

// ---- checkpoints ------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    ModelConfig config;
    Parameters params;
    std::uint64_t step = 0;
    std::map<std::string, std::string> metadata;
};

void save_checkpoint(const std::string& path, const Model& model, std::uint64_t step,
                     const std::map<std::string, std::string>& metadata = {});
/// Throws CheckpointError for unreadable, truncated or version-mismatched files.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace confdec
