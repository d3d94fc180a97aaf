#include "confdec/model.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace confdec {

const char* to_string(AttentionMode m) { return m == AttentionMode::Baseline ? "baseline" : "confident"; }

const char* to_string(ConfidenceSource s) {
    return s == ConfidenceSource::AttentionScore ? "attention" : "probability";
}

AttentionMode parse_attention_mode(const std::string& s) {
    if (s == "baseline") return AttentionMode::Baseline;
    if (s == "confident") return AttentionMode::Confident;
    throw std::invalid_argument("unknown attention mode '" + s + "'");
}

ConfidenceSource parse_confidence_source(const std::string& s) {
    if (s == "attention") return ConfidenceSource::AttentionScore;
    if (s == "probability") return ConfidenceSource::Probability;
    throw std::invalid_argument("unknown confidence source '" + s + "'");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
    if (vocab_size < 1) fail("vocab_size must be >= 1");
    if (embed_dim < 1 || encoder_hidden < 1 || decoder_hidden < 1 || base_lm_hidden < 1)
        fail("all dimensions must be >= 1");
    // v_t = a_t + h_t is scored against the embeddings, so the three sizes coincide.
    if (encoder_hidden != embed_dim || decoder_hidden != embed_dim)
        fail("encoder_hidden and decoder_hidden must equal embed_dim (got " + std::to_string(encoder_hidden) + ", " +
             std::to_string(decoder_hidden) + ", " + std::to_string(embed_dim) + ")");
    auto in_vocab = [&](int id) { return id >= 0 && id < vocab_size; };
    if (!in_vocab(tokens.bos) || !in_vocab(tokens.eos)) fail("bos/eos ids out of range");
    if (tokens.null != -1 && !in_vocab(tokens.null)) fail("null id out of range");
}

// ---- parameters ---------------------------------------------------------

std::vector<std::pair<std::string, Tensor*>> Parameters::named() {
    return {{"embedding", &embedding}, {"src_embedding", &src_embedding}, {"enc_fwd_w", &enc_fwd_w},
            {"enc_fwd_b", &enc_fwd_b}, {"enc_bwd_w", &enc_bwd_w},         {"enc_bwd_b", &enc_bwd_b},
            {"dec_w", &dec_w},         {"dec_b", &dec_b},                 {"attn_w", &attn_w},
            {"gen_w", &gen_w},         {"gen_b", &gen_b},                 {"lm_w", &lm_w},
            {"lm_b", &lm_b},           {"lm_out_w", &lm_out_w},           {"lm_out_b", &lm_out_b},
            {"rho", &rho},             {"log_gamma", &log_gamma},         {"kappa", &kappa}};
}

std::vector<std::pair<std::string, const Tensor*>> Parameters::named() const {
    auto mut = const_cast<Parameters*>(this)->named();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [name, t] : mut) out.emplace_back(name, t);
    return out;
}

std::vector<Tensor*> Parameters::tensors() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
}

std::size_t Parameters::count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += static_cast<std::size_t>(t->size());
    return n;
}

ConfidenceParams Parameters::confidence() const {
    return {rho(0, 0), std::exp(log_gamma(0, 0)), kappa(0, 0)};
}

Parameters Parameters::initialize(const ModelConfig& cfg) {
    cfg.validate();
    const Eigen::Index v = cfg.vocab_size;
    const Eigen::Index d = cfg.embed_dim;
    const Eigen::Index h = cfg.decoder_hidden;
    const Eigen::Index b = cfg.base_lm_hidden;
    const Eigen::Index dec_in = cfg.mode == AttentionMode::Confident ? d : d + h;

    Parameters p;
    p.embedding.resize(v, d);
    p.src_embedding.resize(d, 1);
    p.enc_fwd_w.resize(4 * h, d + h);
    p.enc_fwd_b.resize(4 * h, 1);
    p.enc_bwd_w.resize(4 * h, d + h);
    p.enc_bwd_b.resize(4 * h, 1);
    p.dec_w.resize(4 * h, dec_in + h);
    p.dec_b.resize(4 * h, 1);
    p.attn_w.resize(h, cfg.mode == AttentionMode::Confident ? 2 * h : h);
    p.gen_w.resize(1, 3 * d);
    p.gen_b.resize(1, 1);
    p.lm_w.resize(4 * b, d + b);
    p.lm_b.resize(4 * b, 1);
    p.lm_out_w.resize(v, b);
    p.lm_out_b.resize(v, 1);

    Rng rng(cfg.seed);
    for (auto& [name, t] : p.named()) {
        if (t->size() == 0) continue;
        for (Eigen::Index i = 0; i < t->size(); ++i) (*t)(i) = rng.uniform(-0.1, 0.1);
    }
    p.rho = Tensor::Zero(1, 1);
    p.log_gamma = Tensor::Zero(1, 1);
    p.kappa = Tensor::Zero(1, 1);
    return p;
}

BoundParameters BoundParameters::bind(Graph& g, const Parameters& p) {
    std::vector<Var> leaves;
    for (const auto& [name, t] : p.named()) leaves.push_back(g.leaf(*t));
    return from_leaves(leaves);
}

BoundParameters BoundParameters::from_leaves(std::span<const Var> leaves) {
    if (leaves.size() != 18) throw std::invalid_argument("BoundParameters: expected 18 leaves");
    BoundParameters b;
    std::array<Var*, 18> slots{&b.embedding, &b.src_embedding, &b.enc_fwd_w, &b.enc_fwd_b, &b.enc_bwd_w,
                               &b.enc_bwd_b, &b.dec_w,         &b.dec_b,     &b.attn_w,    &b.gen_w,
                               &b.gen_b,     &b.lm_w,          &b.lm_b,      &b.lm_out_w,  &b.lm_out_b,
                               &b.rho,       &b.log_gamma,     &b.kappa};
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = leaves[i];
    b.leaves.assign(leaves.begin(), leaves.end());
    return b;
}

Model::Model(ModelConfig cfg) : config_(cfg), params_(Parameters::initialize(cfg)) {}

Model::Model(ModelConfig cfg, Parameters params) : config_(cfg), params_(std::move(params)) { config_.validate(); }

// ---- session ----------------------------------------------------------------

Session::Session(Graph& g, const Model& model, DropoutSpec dropout)
    : Session(g, model.config(), BoundParameters::bind(g, model.params()), dropout) {}

Session::Session(Graph& g, const ModelConfig& cfg, BoundParameters bound, DropoutSpec dropout)
    : graph_(&g), cfg_(cfg), p_(std::move(bound)), dropout_(dropout) {
    cfg_.validate();
}

std::pair<Var, Var> Session::lstm(Var w, Var b, Var x, Var h, Var c) {
    const Eigen::Index n = h.rows();
    Var gates = matmul(w, concat(x, h)) + b;
    Var i = sigmoid(slice_rows(gates, 0, n));
    Var f = sigmoid(slice_rows(gates, n, n));
    Var u = tanh(slice_rows(gates, 2 * n, n));
    Var o = sigmoid(slice_rows(gates, 3 * n, n));
    Var c_next = f * c + i * u;
    Var h_next = o * tanh(c_next);
    return {h_next, c_next};
}

namespace {

Tensor dropout_mask(Eigen::Index rows, double rate, Rng& rng) {
    Tensor m(rows, 1);
    const double keep = 1.0 - rate;
    for (Eigen::Index i = 0; i < rows; ++i) m(i, 0) = rng.uniform() < keep ? 1.0 / keep : 0.0;
    return m;
}

}  // namespace

Var Session::input_dropout(Var x) {
    if (!dropout_.active() || dropout_.input <= 0.0) return x;
    return apply_mask(x, dropout_mask(x.rows(), dropout_.input, *dropout_.rng));
}

Var Session::recurrent_dropout(Var h) {
    if (!dropout_.active() || dropout_.recurrent <= 0.0) return h;
    return apply_mask(h, dropout_mask(h.rows(), dropout_.recurrent, *dropout_.rng));
}

EncoderState Session::encode(std::span<const int> source_ids) {
    if (source_ids.empty()) throw std::invalid_argument("encode: empty source");
    Graph& g = *graph_;
    const Eigen::Index hdim = cfg_.encoder_hidden;
    const std::size_t n = source_ids.size();
    std::vector<Var> emb;
    emb.reserve(n);
    for (int id : source_ids) {
        if (id < 0 || id >= cfg_.vocab_size) throw std::out_of_range("encode: token id out of vocabulary");
        emb.push_back(input_dropout(embedding_gather(p_.embedding, id)));
    }
    std::vector<Var> fwd(n), bwd(n);
    Var h = g.constant(Tensor::Zero(hdim, 1));
    Var c = h;
    for (std::size_t s = 0; s < n; ++s) {
        std::tie(h, c) = lstm(p_.enc_fwd_w, p_.enc_fwd_b, emb[s], h, c);
        fwd[s] = h;
    }
    h = g.constant(Tensor::Zero(hdim, 1));
    c = h;
    for (std::size_t s = n; s-- > 0;) {
        std::tie(h, c) = lstm(p_.enc_bwd_w, p_.enc_bwd_b, emb[s], h, c);
        bwd[s] = h;
    }
    std::vector<Var> summed(n);
    for (std::size_t s = 0; s < n; ++s) summed[s] = fwd[s] + bwd[s];
    EncoderState enc;
    enc.states = stack_columns(summed);
    enc.states_t = transpose(enc.states);
    enc.source_ids.assign(source_ids.begin(), source_ids.end());
    return enc;
}

EncoderState Session::zeroed(const EncoderState& enc) {
    EncoderState z;
    z.states = graph_->constant(Tensor::Zero(enc.states.rows(), enc.states.cols()));
    z.states_t = graph_->constant(Tensor::Zero(enc.states.cols(), enc.states.rows()));
    z.source_ids = enc.source_ids;
    return z;
}

StepState Session::initial_state() {
    Graph& g = *graph_;
    StepState s;
    s.h = g.constant(Tensor::Zero(cfg_.decoder_hidden, 1));
    s.c = s.h;
    s.attention = g.constant(Tensor::Zero(cfg_.encoder_hidden, 1));
    s.g = g.constant(Tensor::Zero(cfg_.base_lm_hidden, 1));
    s.gc = s.g;
    s.score = g.scalar(0.0);
    return s;
}

StepOutput Session::step(const StepState& prev, int prev_token, const EncoderState& enc, StepOptions opts) {
    if (prev_token < 0 || prev_token >= cfg_.vocab_size) throw std::out_of_range("step: token id out of vocabulary");
    Graph& g = *graph_;
    const bool confident = cfg_.mode == AttentionMode::Confident;
    StepOutput out;

    Var e = embedding_gather(p_.embedding, prev_token);
    Var x = input_dropout(e);
    if (!confident) x = concat(x, prev.attention);
    auto [h, c] = lstm(p_.dec_w, p_.dec_b, x, recurrent_dropout(prev.h), prev.c);

    Var query = confident ? concat(h, prev.attention) : h;
    Var logits = matmul(enc.states_t, matmul(p_.attn_w, query));
    Var alpha = confident ? softmax_plus_one(logits) : softmax(logits);
    Var a = matmul(enc.states, alpha);
    Var v = a + h;
    Var gen = softmax(matmul(p_.embedding, v));

    Var p_gen;
    Var mixed;
    if (cfg_.copy_enabled) {
        if (opts.force_p_gen) {
            p_gen = g.scalar(*opts.force_p_gen);
        } else {
            const std::array<Var, 3> feats{v, h, e};
            p_gen = sigmoid(matmul(p_.gen_w, concat(feats)) + p_.gen_b);
        }
        Var beta = alpha / sum(alpha);
        Var copy = scatter_add(beta, enc.source_ids, cfg_.vocab_size);
        mixed = p_gen * gen + (1.0 - p_gen) * copy;
    } else {
        p_gen = g.scalar(1.0);
        mixed = gen;
    }

    AttentionScore as = attention_score(a, h, v, p_gen);

    BaseLmOutput lm = base_lm_step(prev.g, prev.gc, prev_token, prev.score);

    out.alpha = alpha;
    out.attention = a;
    out.hidden = h;
    out.context = v;
    out.p_gen = p_gen;
    out.attn_score = as.score;
    out.attn_tilde = as.tilde;
    out.score = cfg_.copy_enabled ? as.tilde : as.score;
    out.gen_dist = gen;
    out.mixed_dist = mixed;
    out.base_dist = lm.dist;
    out.next = StepState{h, c, a, lm.g, lm.gc, out.score};
    return out;
}

Session::BaseLmOutput Session::base_lm_step(Var g_prev, Var gc_prev, int prev_token, Var prev_score) {
    if (prev_token < 0 || prev_token >= cfg_.vocab_size)
        throw std::out_of_range("base_lm_step: token id out of vocabulary");
    Var e = embedding_gather(p_.embedding, prev_token);
    Var w = stop_gradient(prev_score);
    Var in = input_dropout(blend(e, p_.src_embedding, w));
    auto [g, gc] = lstm(p_.lm_w, p_.lm_b, in, recurrent_dropout(g_prev), gc_prev);
    return {g, gc, softmax(matmul(p_.lm_out_w, g) + p_.lm_out_b)};
}

Var Session::confidence_vector(const StepOutput& out) {
    if (cfg_.confidence_source == ConfidenceSource::Probability) return out.mixed_dist;
    return confidence(out.score, out.base_dist);
}

Var Session::token_confidence(const StepOutput& out, int token) {
    if (cfg_.confidence_source == ConfidenceSource::Probability) return pick(out.mixed_dist, token);
    return confidence(out.score, pick(out.base_dist, token));
}

// ---- confidence math --------------------------------------------------------

AttentionScore attention_score(Var a, Var h, Var v, Var p_gen) {
    Var na = euclidean_norm(a);
    Var nh = euclidean_norm(h);
    Var nv = euclidean_norm(v);
    Var denom = add_scalar(0.5 * (na + nh + nv), kScoreEpsilon);
    Var score = na / denom;
    Var tilde = p_gen * score + (1.0 - p_gen);
    return {score, tilde};
}

Var confidence(Var score, Var base_prob) { return score + (1.0 - score) * base_prob; }

Calibrated calibrate(Var mixed, Var conf, Var kappa) {
    Graph& g = mixed.graph();
    Var fixed_mixed = stop_gradient(mixed);
    Var fixed_conf = stop_gradient(conf);
    Var log_conf = log(g.constant(fixed_conf.value().cwiseMax(kConfidenceFloor)));
    Var logits = log(fixed_mixed) + kappa * log_conf;
    Var log_probs = log_softmax(logits);
    return {exp(log_probs), log_probs};
}

double length_penalty(std::size_t length, double alpha) {
    if (alpha == 0.0) return 1.0;
    return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'O', 'N', 'F', 'D', 'E', 'C', '\0'};

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw CheckpointError("checkpoint truncated");
    return v;
}

std::string config_header(const ModelConfig& c, std::uint64_t step, const std::map<std::string, std::string>& meta) {
    std::ostringstream h;
    h << "vocab_size=" << c.vocab_size << '\n'
      << "embed_dim=" << c.embed_dim << '\n'
      << "encoder_hidden=" << c.encoder_hidden << '\n'
      << "decoder_hidden=" << c.decoder_hidden << '\n'
      << "base_lm_hidden=" << c.base_lm_hidden << '\n'
      << "mode=" << to_string(c.mode) << '\n'
      << "copy=" << (c.copy_enabled ? 1 : 0) << '\n'
      << "confidence_source=" << to_string(c.confidence_source) << '\n'
      << "bos=" << c.tokens.bos << '\n'
      << "eos=" << c.tokens.eos << '\n'
      << "null=" << c.tokens.null << '\n'
      << "seed=" << c.seed << '\n'
      << "step=" << step << '\n';
    for (const auto& [k, v] : meta) h << "meta." << k << '=' << v << '\n';
    return h.str();
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, std::uint64_t step,
                     const std::map<std::string, std::string>& metadata) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
    out.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(out, kCheckpointVersion);
    const std::string header = config_header(model.config(), step, metadata);
    write_pod<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    const auto named = model.params().named();
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, t] : named) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t->rows()));
        write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t->cols()));
        out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
    if (!out) throw CheckpointError("failed writing '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError("'" + path + "' is not a checkpoint file");
    const auto version = read_pod<std::uint32_t>(in);
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint version mismatch: file has version " + std::to_string(version) +
                              ", this build reads version " + std::to_string(kCheckpointVersion));
    const auto header_len = read_pod<std::uint64_t>(in);
    if (header_len > (1u << 20)) throw CheckpointError("checkpoint header too large");
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw CheckpointError("checkpoint truncated");

    Checkpoint ck;
    std::map<std::string, std::string> kv;
    std::istringstream hs(header);
    for (std::string line; std::getline(hs, line);) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw CheckpointError("malformed checkpoint header line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const std::string& k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw CheckpointError("checkpoint header missing '" + k + "'");
        return it->second;
    };
    try {
        ModelConfig& c = ck.config;
        c.vocab_size = std::stoi(get("vocab_size"));
        c.embed_dim = std::stoi(get("embed_dim"));
        c.encoder_hidden = std::stoi(get("encoder_hidden"));
        c.decoder_hidden = std::stoi(get("decoder_hidden"));
        c.base_lm_hidden = std::stoi(get("base_lm_hidden"));
        c.mode = parse_attention_mode(get("mode"));
        c.copy_enabled = get("copy") == "1";
        c.confidence_source = parse_confidence_source(get("confidence_source"));
        c.tokens.bos = std::stoi(get("bos"));
        c.tokens.eos = std::stoi(get("eos"));
        c.tokens.null = std::stoi(get("null"));
        c.seed = std::stoull(get("seed"));
        ck.step = std::stoull(get("step"));
        c.validate();
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("invalid checkpoint header: ") + e.what());
    }
    for (const auto& [k, v] : kv)
        if (k.rfind("meta.", 0) == 0) ck.metadata[k.substr(5)] = v;

    ck.params = Parameters::initialize(ck.config);
    auto named = ck.params.named();
    const auto count = read_pod<std::uint32_t>(in);
    if (count != named.size()) throw CheckpointError("checkpoint has " + std::to_string(count) + " arrays, expected " +
                                                     std::to_string(named.size()));
    for (auto& [name, t] : named) {
        const auto len = read_pod<std::uint32_t>(in);
        if (len > 256) throw CheckpointError("checkpoint array name too long");
        std::string got(len, '\0');
        in.read(got.data(), len);
        if (!in) throw CheckpointError("checkpoint truncated");
        if (got != name) throw CheckpointError("checkpoint array '" + got + "' where '" + name + "' expected");
        const auto rows = read_pod<std::uint64_t>(in);
        const auto cols = read_pod<std::uint64_t>(in);
        if (rows != static_cast<std::uint64_t>(t->rows()) || cols != static_cast<std::uint64_t>(t->cols()))
            throw CheckpointError("checkpoint array '" + name + "' has wrong shape");
        in.read(reinterpret_cast<char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
        if (!in) throw CheckpointError("checkpoint truncated");
        if (!t->allFinite()) throw CheckpointError("checkpoint array '" + name + "' holds non-finite values");
    }
    return ck;
}

}  // namespace confdec
