#include "confdec/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

namespace confdec {

void DecodeConfig::validate() const {
    if (beam_size < 1) throw std::invalid_argument("DecodeConfig: beam_size must be >= 1");
    if (max_len < 1) throw std::invalid_argument("DecodeConfig: max_len must be >= 1");
    if (length_penalty_alpha < 0.0) throw std::invalid_argument("DecodeConfig: length_penalty_alpha must be >= 0");
    if (null_threshold && (*null_threshold < 0.0 || *null_threshold > 1.0))
        throw std::invalid_argument("DecodeConfig: null_threshold must lie in [0, 1]");
}

std::vector<int> strip_nulls(std::span<const int> tokens, int null_id) {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (int t : tokens)
        if (t != null_id) out.push_back(t);
    return out;
}

namespace {

struct Hyp {
    std::vector<int> emission;
    std::vector<DecoderTrace> trace;
    double score = 0.0;
    StepState state;
    int prev = 0;
    bool last_null = false;
};

struct Candidate {
    double score;
    int token;
    std::size_t hyp;
};

/// Per-step log scores, confidences and the step itself for one alive hypothesis.
struct Expansion {
    StepOutput out;
    Vector log_scores;
    Vector confidence;
};

Expansion expand(Session& session, const Hyp& hyp, const EncoderState& enc, double kappa, bool calibrated) {
    Expansion ex;
    ex.out = session.step(hyp.state, hyp.prev, enc);
    const Vector mixed = ex.out.mixed_dist.value().col(0);
    ex.confidence = session.confidence_vector(ex.out).value().col(0);
    Vector logits = mixed.array().max(kLogFloor).log().matrix();
    if (calibrated && kappa != 0.0) {
        logits.array() += kappa * ex.confidence.array().max(kConfidenceFloor).log();
        const double m = logits.maxCoeff();
        const double lse = m + std::log((logits.array() - m).exp().sum());
        logits.array() -= lse;
    }
    ex.log_scores = std::move(logits);
    return ex;
}

DecoderTrace make_trace(const Expansion& ex, int token, int emitted) {
    DecoderTrace t;
    t.token = token;
    t.emitted = emitted;
    const Tensor& alpha = ex.out.alpha.value();
    t.alpha.assign(alpha.data(), alpha.data() + alpha.size());
    t.attention = ex.out.attention.value().col(0);
    t.hidden = ex.out.hidden.value().col(0);
    t.context = ex.out.context.value().col(0);
    t.attn_score = ex.out.attn_score.scalar();
    t.attn_tilde = ex.out.attn_tilde.scalar();
    t.p_gen = ex.out.p_gen.scalar();
    t.base_prob = ex.out.base_dist.value()(token, 0);
    t.confidence = ex.confidence(token);
    t.log_prob = ex.log_scores(token);
    return t;
}

}  // namespace

DecodeResult beam_search(const Model& model, std::span<const int> source, const DecodeConfig& cfg,
                         const SourceMask& zero_source) {
    cfg.validate();
    const ModelConfig& mc = model.config();
    const int null_id = mc.tokens.null;
    const int eos = mc.tokens.eos;
    if (cfg.null_threshold && null_id < 0) throw std::invalid_argument("beam_search: null threshold needs a <null> token");
    const double kappa = model.params().kappa(0, 0);

    Graph g;
    Session session(g, model);
    const EncoderState enc = session.encode(source);
    std::optional<EncoderState> blank;

    std::vector<Hyp> alive(1);
    alive[0].state = session.initial_state();
    alive[0].prev = mc.tokens.bos;

    struct Done {
        Hyp hyp;
        bool finished;
    };
    std::vector<Done> done;

    for (std::size_t step = 0; step < cfg.max_len && !alive.empty(); ++step) {
        const EncoderState* use = &enc;
        if (zero_source && zero_source(step)) {
            if (!blank) blank = session.zeroed(enc);
            use = &*blank;
        }
        std::vector<Expansion> expansions;
        expansions.reserve(alive.size());
        std::vector<Candidate> cands;
        for (std::size_t i = 0; i < alive.size(); ++i) {
            expansions.push_back(expand(session, alive[i], *use, kappa, cfg.use_calibration));
            const Vector& ls = expansions.back().log_scores;
            for (int y = 0; y < mc.vocab_size; ++y) {
                if (alive[i].last_null && y == null_id) continue;
                cands.push_back({alive[i].score + ls(y), y, i});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.token != b.token) return a.token < b.token;
            return a.hyp < b.hyp;
        });

        std::vector<Hyp> next;
        std::set<std::pair<std::size_t, int>> seen;
        for (const Candidate& c : cands) {
            if (next.size() >= cfg.beam_size) break;
            const Hyp& parent = alive[c.hyp];
            const Expansion& ex = expansions[c.hyp];
            int emitted = c.token;
            if (cfg.null_threshold && c.token != eos && c.token != null_id &&
                ex.confidence(c.token) < *cfg.null_threshold)
                emitted = null_id;
            if (emitted == null_id && parent.last_null) continue;
            if (!seen.insert({c.hyp, emitted}).second) continue;

            Hyp h;
            h.emission = parent.emission;
            h.trace = parent.trace;
            h.trace.push_back(make_trace(ex, c.token, emitted));
            h.score = c.score;
            if (emitted == eos) {
                done.push_back({std::move(h), true});
                continue;
            }
            h.emission.push_back(emitted);
            h.state = ex.out.next;
            h.prev = emitted;
            h.last_null = emitted == null_id;
            next.push_back(std::move(h));
        }
        alive = std::move(next);

        if (cfg.length_penalty_alpha == 0.0 && !alive.empty()) {
            double best_done = -std::numeric_limits<double>::infinity();
            for (const Done& d : done) best_done = std::max(best_done, d.hyp.score);
            if (best_done >= alive.front().score) {
                alive.clear();
            }
        }
    }
    for (Hyp& h : alive) done.push_back({std::move(h), false});

    DecodeResult best;
    bool have = false;
    for (Done& d : done) {
        const std::size_t len = d.hyp.emission.size() + (d.finished ? 1 : 0);
        const double ranked = d.hyp.score / length_penalty(len, cfg.length_penalty_alpha);
        if (!have || ranked > best.ranking_score) {
            have = true;
            best.ranking_score = ranked;
            best.score = d.hyp.score;
            best.finished = d.finished;
            best.emission = d.hyp.emission;
            best.trace = d.hyp.trace;
        }
    }
    best.tokens = strip_nulls(best.emission, null_id);
    return best;
}

std::vector<TraceRow> trace(const Model& model, std::span<const int> source, std::span<const int> target) {
    Graph g;
    Session session(g, model);
    const EncoderState enc = session.encode(source);
    StepState state = session.initial_state();
    int prev = model.config().tokens.bos;
    std::vector<TraceRow> rows;
    rows.reserve(target.size());
    for (int tok : target) {
        if (tok < 0 || tok >= model.config().vocab_size) throw std::out_of_range("trace: token id out of vocabulary");
        StepOutput out = session.step(state, prev, enc);
        TraceRow r;
        r.token = tok;
        r.score = out.score.scalar();
        r.attn_score = out.attn_score.scalar();
        r.p_gen = out.p_gen.scalar();
        r.base_prob = out.base_dist.value()(tok, 0);
        r.confidence = r.score + (1.0 - r.score) * r.base_prob;
        r.prob = out.mixed_dist.value()(tok, 0);
        rows.push_back(r);
        state = out.next;
        prev = tok;
    }
    return rows;
}

ProbeResult source_sensitivity_probe(const Model& model, std::span<const EncodedExample> data, double p,
                                     std::size_t trials, const DecodeConfig& cfg) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("source_sensitivity_probe: p must lie in [0, 1]");
    if (trials < 1) throw std::invalid_argument("source_sensitivity_probe: trials must be >= 1");
    if (data.empty()) throw std::invalid_argument("source_sensitivity_probe: empty dataset");
    DecodeConfig greedy = cfg;
    greedy.beam_size = 1;

    std::vector<std::vector<int>> clean;
    clean.reserve(data.size());
    for (const auto& ex : data) clean.push_back(beam_search(model, ex.source, greedy).tokens);

    ProbeResult result;
    result.p = p;
    for (std::size_t r = 0; r < trials; ++r) {
        const std::uint64_t trial_seed = derive_seed(cfg.seed, r);
        std::size_t changed = 0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            Rng rng(derive_seed(trial_seed, i));
            std::vector<double> draws(greedy.max_len);
            for (double& u : draws) u = rng.uniform();
            auto mask = [&](std::size_t step) { return draws[step] < p; };
            if (beam_search(model, data[i].source, greedy, mask).tokens != clean[i]) ++changed;
        }
        result.per_trial.push_back(static_cast<double>(changed) / static_cast<double>(data.size()));
    }
    double sum = 0.0;
    for (double v : result.per_trial) sum += v;
    result.mean_changed = sum / static_cast<double>(trials);
    double ss = 0.0;
    for (double v : result.per_trial) ss += (v - result.mean_changed) * (v - result.mean_changed);
    result.stddev = trials > 1 ? std::sqrt(ss / static_cast<double>(trials - 1)) : 0.0;
    return result;
}

}  // namespace confdec
