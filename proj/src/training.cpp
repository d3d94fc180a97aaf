#include "confdec/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

namespace confdec {

const char* to_string(Objective o) { return o == Objective::Variational ? "variational" : "likelihood"; }

Objective parse_objective(const std::string& s) {
    if (s == "variational") return Objective::Variational;
    if (s == "likelihood") return Objective::Likelihood;
    throw std::invalid_argument("unknown objective '" + s + "'");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("TrainConfig: " + msg); };
    if (K < 1) fail("K must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (learning_rate < 0.0) fail("learning_rate must be >= 0");
    if (skip_penalty < 0.0) fail("skip_penalty must be >= 0");
    if (input_dropout < 0.0 || input_dropout >= 1.0 || recurrent_dropout < 0.0 || recurrent_dropout >= 1.0)
        fail("dropout rates must lie in [0, 1)");
}

namespace {

double log_sigmoid_value(double u) { return u >= 0.0 ? -std::log1p(std::exp(-u)) : u - std::log1p(std::exp(u)); }

double keep_logit(double c, double rho, double log_gamma) {
    return rho * std::log(std::max(c, kConfidenceFloor)) - log_gamma;
}

}  // namespace

double keep_probability(double c, double rho, double gamma) {
    return std::exp(log_sigmoid_value(keep_logit(c, rho, std::log(gamma))));
}

Induced induce_subsequence(std::span<const int> y, std::span<const Label> labels, bool null_mode, int null_id) {
    if (labels.size() != y.size()) throw std::invalid_argument("induce_subsequence: labels and target differ in length");
    if (null_mode && null_id < 0) throw std::invalid_argument("induce_subsequence: null mode needs a <null> id");
    Induced out;
    for (std::size_t t = 0; t < y.size(); ++t) {
        if (labels[t] == Label::Keep) {
            out.z.push_back(y[t]);
            out.iota.push_back(static_cast<int>(t));
        } else if (null_mode && (t == 0 || labels[t - 1] == Label::Keep)) {
            out.z.push_back(null_id);
            out.iota.push_back(static_cast<int>(t));
        }
    }
    return out;
}

SubsequenceSample sample_subsequence(std::span<const Var> confidences, std::span<const int> y, Var rho, Var log_gamma,
                                     bool null_mode, int null_id, Rng& rng, const std::vector<Label>* forced) {
    const std::size_t T = y.size();
    if (confidences.size() != T) throw std::invalid_argument("sample_subsequence: one confidence per target position");
    if (T == 0) throw std::invalid_argument("sample_subsequence: empty target");
    if (forced != nullptr && forced->size() != T) throw std::invalid_argument("sample_subsequence: forced labels length");
    Graph& g = rho.graph();

    SubsequenceSample s;
    s.labels.assign(T, Label::Keep);
    Var log_q = g.scalar(0.0);
    for (std::size_t t = 0; t + 1 < T; ++t) {
        Var u = rho * log(clamp_min(confidences[t], kConfidenceFloor)) - log_gamma;
        Label label;
        if (forced != nullptr) {
            label = (*forced)[t];
        } else {
            const double p_keep = std::exp(log_sigmoid_value(u.scalar()));
            label = rng.uniform() < p_keep ? Label::Keep : Label::Skip;
        }
        s.labels[t] = label;
        log_q = log_q + log_sigmoid(label == Label::Keep ? u : -u);
    }
    if (forced != nullptr && forced->back() != Label::Keep)
        throw std::invalid_argument("sample_subsequence: the final position is always kept");
    Induced ind = induce_subsequence(y, s.labels, null_mode, null_id);
    s.z_tokens = std::move(ind.z);
    s.iota = std::move(ind.iota);
    s.log_q = log_q;
    return s;
}

SequenceScore sequence_log_prob(Session& session, const EncoderState& enc, std::span<const int> z) {
    if (z.empty()) throw std::invalid_argument("sequence_log_prob: empty target");
    const int V = session.config().vocab_size;
    for (int id : z)
        if (id < 0 || id >= V) throw std::out_of_range("sequence_log_prob: token id " + std::to_string(id) + " out of vocabulary");
    Graph& g = session.graph();
    SequenceScore out;
    out.log_p = g.scalar(0.0);
    out.log_p_cal = g.scalar(0.0);
    out.log_p_base = g.scalar(0.0);
    StepState state = session.initial_state();
    int prev = session.config().tokens.bos;
    for (int tok : z) {
        StepOutput step = session.step(state, prev, enc);
        Var conf = session.confidence_vector(step);
        Calibrated cal = calibrate(step.mixed_dist, conf, session.bound().kappa);
        out.log_p = out.log_p + log(pick(step.mixed_dist, tok));
        out.log_p_cal = out.log_p_cal + pick(cal.log_probs, tok);
        out.log_p_base = out.log_p_base + log(pick(step.base_dist, tok));
        out.confidences.push_back(session.token_confidence(step, tok));
        state = step.next;
        prev = tok;
        out.steps.push_back(std::move(step));
    }
    return out;
}

Var base_lm_log_prob(Session& session, std::span<const int> z, std::span<const double> scores) {
    if (scores.size() != z.size()) throw std::invalid_argument("base_lm_log_prob: one score per position");
    Graph& g = session.graph();
    StepState init = session.initial_state();
    Var h = init.g, c = init.gc;
    Var total = g.scalar(0.0);
    int prev = session.config().tokens.bos;
    double prev_score = 0.0;
    for (std::size_t t = 0; t < z.size(); ++t) {
        auto lm = session.base_lm_step(h, c, prev, g.scalar(prev_score));
        total = total + log(pick(lm.dist, z[t]));
        h = lm.g;
        c = lm.gc;
        prev = z[t];
        prev_score = scores[t];
    }
    return total;
}

VbLoss vb_loss(Session& session, const EncodedExample& ex, const VbOptions& opts, Rng& rng) {
    if (opts.K < 1) throw std::invalid_argument("vb_loss: K must be >= 1");
    Graph& g = session.graph();
    const BoundParameters& p = session.bound();
    const int null_id = session.config().tokens.null;

    EncoderState enc = session.encode(ex.source);
    SequenceScore full = sequence_log_prob(session, enc, ex.target);

    VbLoss out;
    Var loss_sum = g.scalar(0.0);
    Var bound_sum = g.scalar(0.0);
    for (int k = 0; k < opts.K; ++k) {
        SubsequenceSample sample;
        const std::vector<Label>* forced = nullptr;
        if (!opts.forced_labels.empty())
            forced = &opts.forced_labels[static_cast<std::size_t>(k) % opts.forced_labels.size()];
        if (opts.keep_all) {
            sample.labels.assign(ex.target.size(), Label::Keep);
            sample.z_tokens = ex.target;
            sample.iota.resize(ex.target.size());
            std::iota(sample.iota.begin(), sample.iota.end(), 0);
            sample.log_q = g.scalar(0.0);
        } else {
            sample = sample_subsequence(full.confidences, ex.target, p.rho, p.log_gamma, opts.null_mode, null_id, rng,
                                        forced);
        }
        const bool is_full = sample.z_tokens == ex.target;
        SequenceScore zs = is_full ? full : sequence_log_prob(session, enc, sample.z_tokens);

        Var h = sample.log_q - zs.log_p;
        if (opts.skip_penalty != 0.0) {
            const auto skips = std::count(sample.labels.begin(), sample.labels.end(), Label::Skip);
            h = add_scalar(h, opts.skip_penalty * static_cast<double>(skips));
        }
        Var bound = h + stop_gradient(h) * (sample.log_q - stop_gradient(sample.log_q));
        Var term = bound;
        if (opts.base_lm_term) term = term - zs.log_p_base;
        if (opts.calibration_term) term = term - zs.log_p_cal;

        bound_sum = bound_sum + bound;
        loss_sum = loss_sum + term;
        out.base_value -= zs.log_p_base.scalar();
        out.calibration_value -= zs.log_p_cal.scalar();
        out.samples.push_back(std::move(sample));
    }
    const double inv_k = 1.0 / opts.K;
    out.loss = scale(loss_sum, inv_k);
    out.bound = scale(bound_sum, inv_k);
    out.bound_value = out.bound.scalar();
    out.base_value *= inv_k;
    out.calibration_value *= inv_k;
    return out;
}

Var likelihood_loss(Session& session, const EncodedExample& ex, bool base_lm_term, bool calibration_term) {
    EncoderState enc = session.encode(ex.source);
    SequenceScore s = sequence_log_prob(session, enc, ex.target);
    Var loss = -s.log_p;
    if (base_lm_term) loss = loss - s.log_p_base;
    if (calibration_term) loss = loss - s.log_p_cal;
    return loss;
}

ExactObjective exact_vb_objective(const Model& model, const EncodedExample& ex, bool null_mode,
                                  const ExactOptions& opts) {
    const std::size_t T = ex.target.size();
    if (T == 0) throw std::invalid_argument("exact_vb_objective: empty target");
    if (T > kMaxEnumerationLength)
        throw std::invalid_argument("exact_vb_objective: target length " + std::to_string(T) + " exceeds " +
                                    std::to_string(kMaxEnumerationLength));
    const ConfidenceParams cp = model.params().confidence();
    const double log_gamma = model.params().log_gamma(0, 0);

    if (opts.record_sg != nullptr) opts.record_sg->clear();
    std::size_t pass = 0;
    auto freeze = [&](Graph& g) {
        if (opts.replay_sg != nullptr) {
            if (pass >= opts.replay_sg->size()) throw std::logic_error("exact_vb_objective: replay has too few passes");
            g.replay_stop_gradients(&(*opts.replay_sg)[pass]);
        } else if (opts.record_sg != nullptr) {
            g.record_stop_gradients(&opts.record_sg->emplace_back());
        }
        ++pass;
    };

    std::vector<double> keep_logits(T, 0.0);
    {
        Graph g;
        freeze(g);
        Session s(g, model);
        EncoderState enc = s.encode(ex.source);
        SequenceScore full = sequence_log_prob(s, enc, ex.target);
        for (std::size_t t = 0; t < T; ++t) keep_logits[t] = keep_logit(full.confidences[t].scalar(), cp.rho, log_gamma);
    }

    struct Scores {
        double log_p, log_p_base, log_p_cal;
    };
    std::map<std::vector<int>, Scores> cache;
    auto score = [&](const std::vector<int>& z) -> const Scores& {
        auto it = cache.find(z);
        if (it != cache.end()) return it->second;
        Graph g;
        freeze(g);
        Session s(g, model);
        EncoderState enc = s.encode(ex.source);
        SequenceScore sc = sequence_log_prob(s, enc, z);
        return cache.emplace(z, Scores{sc.log_p.scalar(), sc.log_p_base.scalar(), sc.log_p_cal.scalar()}).first->second;
    };

    ExactObjective out;
    const std::size_t free_positions = T - 1;
    const std::size_t n = std::size_t{1} << free_positions;
    std::vector<double> log_terms;
    log_terms.reserve(n);
    out.q.reserve(n);
    out.aux.reserve(n);
    std::vector<Label> labels(T, Label::Keep);
    for (std::size_t mask = 0; mask < n; ++mask) {
        double log_q = 0.0;
        double skips = 0.0;
        for (std::size_t t = 0; t < free_positions; ++t) {
            const bool keep = ((mask >> t) & 1U) == 0U;
            skips += keep ? 0.0 : 1.0;
            labels[t] = keep ? Label::Keep : Label::Skip;
            log_q += log_sigmoid_value(keep ? keep_logits[t] : -keep_logits[t]);
        }
        Induced ind = induce_subsequence(ex.target, labels, null_mode, model.config().tokens.null);
        const Scores& sc = score(ind.z);
        const double q = std::exp(log_q);
        const double penalty = opts.skip_penalty * skips;
        out.bound += q * (log_q - sc.log_p + penalty);
        out.base_term -= q * sc.log_p_base;
        out.calibration_term -= q * sc.log_p_cal;
        out.q.push_back(q);
        out.aux.push_back(-sc.log_p_base - sc.log_p_cal);
        log_terms.push_back(sc.log_p - penalty);
    }
    auto log_sum_exp = [](const std::vector<double>& xs) {
        const double m = *std::max_element(xs.begin(), xs.end());
        double acc = 0.0;
        for (double x : xs) acc += std::exp(x - m);
        return m + std::log(acc);
    };
    out.log_evidence = log_sum_exp(log_terms);
    std::vector<double> distinct;
    for (const auto& [z, sc] : cache) distinct.push_back(sc.log_p);
    out.log_evidence_distinct = log_sum_exp(distinct);
    out.labelings = n;
    return out;
}

// ---- optimization -----------------------------------------------------------

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor> grads, std::span<const bool> frozen) {
    if (grads.size() != params.size()) throw std::invalid_argument("Adam::step: one gradient per parameter");
    if (m_.empty()) {
        for (Tensor* p : params) {
            m_.push_back(Tensor::Zero(p->rows(), p->cols()));
            v_.push_back(Tensor::Zero(p->rows(), p->cols()));
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!frozen.empty() && frozen[i]) continue;
        m_[i] = b1_ * m_[i] + (1.0 - b1_) * grads[i];
        v_[i] = b2_ * v_[i] + (1.0 - b2_) * grads[i].cwiseProduct(grads[i]);
        params[i]->array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
}

std::ostream& operator<<(std::ostream& os, const EpochRecord& r) {
    std::ostringstream line;
    line.precision(6);
    line << "epoch=" << r.epoch << " objective=" << to_string(r.objective) << " train_loss=" << r.train_loss << " valid_loss=" << r.valid_loss
         << " rho=" << r.confidence.rho << " gamma=" << r.confidence.gamma << " kappa=" << r.confidence.kappa;
    return os << line.str();
}

Var example_loss(Session& session, const EncodedExample& ex, const TrainConfig& cfg, Objective objective, Rng& rng) {
    if (objective == Objective::Likelihood) return likelihood_loss(session, ex, cfg.train_base_lm, cfg.calibration);
    VbOptions opts;
    opts.K = cfg.K;
    opts.null_mode = cfg.null_mode;
    opts.base_lm_term = cfg.train_base_lm;
    opts.calibration_term = cfg.calibration;
    opts.skip_penalty = cfg.skip_penalty;
    return vb_loss(session, ex, opts, rng).loss;
}

double evaluate_loss(const Model& model, std::span<const EncodedExample> data, const TrainConfig& cfg,
                     Objective objective, std::uint64_t seed) {
    if (data.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        Rng rng(derive_seed(seed, i));
        Graph g;
        Session s(g, model);
        total += example_loss(s, data[i], cfg, objective, rng).scalar();
    }
    return total / static_cast<double>(data.size());
}

TrainReport fit(Model& model, std::span<const EncodedExample> train, std::span<const EncodedExample> valid,
                const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    if (train.empty() || valid.empty()) throw std::invalid_argument("fit: training and validation splits must be nonempty");

    std::vector<Tensor*> params = model.params().tensors();
    const auto named = model.params().named();
    std::unique_ptr<bool[]> frozen(new bool[params.size()]());
    for (std::size_t i = 0; i < named.size(); ++i) frozen[i] = named[i].first == "kappa" && !cfg.calibration;

    Adam adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    std::vector<Tensor> accum;
    for (Tensor* p : params) accum.push_back(Tensor::Zero(p->rows(), p->cols()));

    TrainReport report;
    report.best_valid_loss = std::numeric_limits<double>::infinity();
    Parameters best = model.params();
    std::size_t stale = 0;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const std::uint64_t valid_seed = derive_seed(cfg.seed, 0x76616c6964ULL);

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const Objective objective = epoch <= cfg.warmup_epochs ? Objective::Likelihood : cfg.objective;
        if (epoch == cfg.warmup_epochs + 1 && objective != Objective::Likelihood) {
            report.best_valid_loss = std::numeric_limits<double>::infinity();
            stale = 0;
        }
        const std::uint64_t epoch_seed = derive_seed(cfg.seed, epoch);
        Rng shuffler(epoch_seed);
        std::shuffle(order.begin(), order.end(), shuffler.engine());

        double total = 0.0;
        std::size_t in_batch = 0;
        for (std::size_t pos = 0; pos < order.size(); ++pos) {
            const std::size_t idx = order[pos];
            Rng rng(derive_seed(epoch_seed, idx));
            Graph g;
            Session s(g, model, DropoutSpec{cfg.input_dropout, cfg.recurrent_dropout, &rng});
            Var loss;
            try {
                loss = example_loss(s, train[idx], cfg, objective, rng);
            } catch (const NumericError& e) {
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", example " +
                                       std::to_string(idx) + ": " + e.what());
            }
            if (!std::isfinite(loss.scalar()))
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", example " +
                                       std::to_string(idx) + ": non-finite loss");
            g.backward(loss);
            const auto& leaves = s.bound().leaves;
            for (std::size_t i = 0; i < params.size(); ++i) accum[i] += g.grad(leaves[i]);
            total += loss.scalar();

            if (++in_batch == cfg.batch_size || pos + 1 == order.size()) {
                for (Tensor& a : accum) a /= static_cast<double>(in_batch);
                adam.step(params, accum, std::span<const bool>(frozen.get(), params.size()));
                for (Tensor& a : accum) a.setZero();
                in_batch = 0;
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.objective = objective;
        rec.train_loss = total / static_cast<double>(train.size());
        rec.valid_loss = evaluate_loss(model, valid, cfg, objective, valid_seed);
        rec.confidence = model.params().confidence();
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (rec.valid_loss < report.best_valid_loss) {
            report.best_valid_loss = rec.valid_loss;
            report.best_epoch = epoch;
            best = model.params();
            stale = 0;
        } else if (++stale >= cfg.patience) {
            report.stopped_early = true;
            break;
        }
    }
    report.updates = adam.steps();
    model.params() = best;
    return report;
}

}  // namespace confdec
