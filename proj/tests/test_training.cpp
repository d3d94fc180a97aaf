#include "confdec/training.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace confdec;

namespace {

ModelConfig toy_config(std::uint64_t seed = 1) {
    ModelConfig c;
    c.vocab_size = 9;
    c.embed_dim = c.encoder_hidden = c.decoder_hidden = 3;
    c.base_lm_hidden = 2;
    c.tokens = {1, 2, 4};
    c.seed = seed;
    return c;
}

Model toy_model(std::uint64_t seed, double rho = 0.8, double gamma = 0.7, double kappa = 0.4) {
    Model m(toy_config(seed));
    m.params().rho(0, 0) = rho;
    m.params().log_gamma(0, 0) = std::log(gamma);
    m.params().kappa(0, 0) = kappa;
    return m;
}

EncodedExample toy_example() { return {{5, 6, 7, 8, 3}, {6, 3, 7, 8, 2}}; }

std::vector<Label> labels_of(std::size_t mask, std::size_t T) {
    std::vector<Label> l(T, Label::Keep);
    for (std::size_t t = 0; t + 1 < T; ++t)
        if ((mask >> t) & 1U) l[t] = Label::Skip;
    return l;
}

}  // namespace

TEST_CASE("keep probability") {
    for (double c : {1e-9, 0.1, 0.5, 0.99, 1.0}) CHECK(keep_probability(c, 0.0, 1.0) == doctest::Approx(0.5));
    const double c = 0.3, rho = 2.5, gamma = 0.4;
    CHECK(keep_probability(c, rho, gamma) == doctest::Approx(std::pow(c, rho) / (std::pow(c, rho) + gamma)).epsilon(1e-13));
    CHECK(keep_probability(0.9, 3.0, 1.0) > keep_probability(0.2, 3.0, 1.0));
}

TEST_CASE("induced sub-sequences") {
    const std::vector<int> y{10, 11, 12, 13, 2};
    using L = Label;
    const std::vector<L> labels{L::Skip, L::Skip, L::Keep, L::Skip, L::Keep};
    const Induced plain = induce_subsequence(y, labels, false, 4);
    CHECK(plain.z == std::vector<int>{12, 2});
    CHECK(plain.iota == std::vector<int>{2, 4});
    const Induced nulls = induce_subsequence(y, labels, true, 4);
    CHECK(nulls.z == std::vector<int>{4, 12, 4, 2});
    CHECK(nulls.iota == std::vector<int>{0, 2, 3, 4});
    CHECK_THROWS_AS(induce_subsequence(y, std::vector<L>(3, L::Keep), false, 4), std::invalid_argument);
}

TEST_CASE("null mode never produces consecutive nulls and keeps every kept token") {
    Rng rng(31);
    for (int trial = 0; trial < 5000; ++trial) {
        const std::size_t T = 1 + rng.below(10);
        std::vector<int> y(T);
        std::vector<Label> labels(T);
        for (std::size_t t = 0; t < T; ++t) {
            y[t] = 5 + static_cast<int>(rng.below(4));
            labels[t] = rng.bernoulli(0.5) ? Label::Keep : Label::Skip;
        }
        const Induced ind = induce_subsequence(y, labels, true, 4);
        REQUIRE(ind.z.size() == ind.iota.size());
        for (std::size_t i = 1; i < ind.z.size(); ++i) {
            REQUIRE_FALSE((ind.z[i] == 4 && ind.z[i - 1] == 4));
            REQUIRE(ind.iota[i] > ind.iota[i - 1]);
        }
        const auto kept = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), Label::Keep));
        REQUIRE(static_cast<std::size_t>(std::count_if(ind.z.begin(), ind.z.end(), [](int z) { return z != 4; })) == kept);
    }
}

TEST_CASE("sampled labels follow the keep probabilities and log Q is their log-likelihood") {
    Graph g;
    const std::vector<double> cs{0.2, 0.9, 0.5, 0.7};
    std::vector<Var> conf;
    for (double c : cs) conf.push_back(g.scalar(c));
    const std::vector<int> y{5, 6, 7, 2};
    const double rho = 1.7, gamma = 0.6;
    Var rho_v = g.scalar(rho), lg = g.scalar(std::log(gamma));
    Rng rng(5);
    std::vector<double> keeps(4, 0.0);
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const SubsequenceSample s = sample_subsequence(conf, y, rho_v, lg, false, 4, rng);
        REQUIRE(s.labels.back() == Label::Keep);
        double lq = 0.0;
        for (std::size_t t = 0; t < 3; ++t) {
            const double p = keep_probability(cs[t], rho, gamma);
            lq += std::log(s.labels[t] == Label::Keep ? p : 1.0 - p);
            keeps[t] += s.labels[t] == Label::Keep;
        }
        REQUIRE(s.log_q_value() == doctest::Approx(lq).epsilon(1e-12));
    }
    for (std::size_t t = 0; t < 3; ++t) {
        const double p = keep_probability(cs[t], rho, gamma);
        CHECK(std::abs(keeps[t] / n - p) < 4.0 * std::sqrt(p * (1 - p) / n));
    }
}

TEST_CASE("vb_loss with every position kept reduces to the likelihood") {
    Model m = toy_model(3);
    const EncodedExample ex = toy_example();
    Graph g1;
    Session s1(g1, m);
    Rng rng(1);
    VbOptions opts;
    opts.K = 1;
    opts.keep_all = true;
    const double vb = vb_loss(s1, ex, opts, rng).loss.scalar();
    Graph g2;
    Session s2(g2, m);
    CHECK(vb == doctest::Approx(likelihood_loss(s2, ex, true, true).scalar()).epsilon(1e-13));
}

TEST_CASE("vb_loss value equals the per-sample objective for forced labels") {
    Model m = toy_model(4);
    const EncodedExample ex = toy_example();
    const std::size_t T = ex.target.size();
    const std::vector<std::vector<Label>> forced{labels_of(0b0101, T), labels_of(0b0010, T), labels_of(0b1111, T)};
    for (bool null_mode : {false, true}) {
        Graph g;
        Session s(g, m);
        Rng rng(1);
        VbOptions opts;
        opts.K = 3;
        opts.null_mode = null_mode;
        opts.forced_labels = forced;
        opts.skip_penalty = 0.3;
        const VbLoss loss = vb_loss(s, ex, opts, rng);

        double expected = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
            Graph gz;
            Session sz(gz, m);
            EncoderState enc = sz.encode(ex.source);
            const SequenceScore full = sequence_log_prob(sz, enc, ex.target);
            const SubsequenceSample smp = sample_subsequence(full.confidences, ex.target, sz.bound().rho,
                                                             sz.bound().log_gamma, null_mode, 4, rng, &forced[k]);
            const SequenceScore zs = sequence_log_prob(sz, enc, smp.z_tokens);
            const auto skips = static_cast<double>(std::count(forced[k].begin(), forced[k].end(), Label::Skip));
            expected += smp.log_q_value() - zs.log_p.scalar() + 0.3 * skips - zs.log_p_base.scalar() - zs.log_p_cal.scalar();
        }
        CHECK(loss.loss.scalar() == doctest::Approx(expected / 3.0).epsilon(1e-12));
    }
}

TEST_CASE("exact objective equals a labeling-by-labeling sum") {
    Model m = toy_model(6);
    const EncodedExample ex = toy_example();
    const std::size_t T = ex.target.size();
    for (bool null_mode : {false, true}) {
        const ExactObjective exact = exact_vb_objective(m, ex, null_mode, {.skip_penalty = 0.2});
        CHECK(exact.labelings == (std::size_t{1} << (T - 1)));
        double total = 0.0, mass = 0.0;
        for (std::size_t mask = 0; mask < exact.labelings; ++mask) {
            const std::vector<std::vector<Label>> forced{labels_of(mask, T)};
            Graph g;
            Session s(g, m);
            Rng rng(1);
            VbOptions opts;
            opts.K = 1;
            opts.null_mode = null_mode;
            opts.forced_labels = forced;
            opts.skip_penalty = 0.2;
            const VbLoss l = vb_loss(s, ex, opts, rng);
            const double q = std::exp(l.samples[0].log_q_value());
            mass += q;
            total += q * l.loss.scalar();
            CHECK(exact.q[mask] == doctest::Approx(q).epsilon(1e-12));
            CHECK(exact.aux[mask] == doctest::Approx(l.base_value + l.calibration_value).epsilon(1e-12));
        }
        CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(exact.total(true, true) == doctest::Approx(total).epsilon(1e-11));
    }
}

TEST_CASE("the bound dominates the negative log evidence over labelings") {
    Rng rng(77);
    for (int trial = 0; trial < 25; ++trial) {
        Model m = toy_model(1000 + static_cast<std::uint64_t>(trial), rng.uniform(-2.0, 4.0), rng.uniform(0.1, 3.0));
        EncodedExample ex;
        ex.source = {5, 6, 7};
        const std::size_t T = 2 + rng.below(4);
        for (std::size_t t = 0; t + 1 < T; ++t) ex.target.push_back(5 + static_cast<int>(rng.below(4)));
        ex.target.push_back(2);
        for (bool null_mode : {false, true}) {
            const ExactObjective e = exact_vb_objective(m, ex, null_mode);
            REQUIRE(e.bound >= -e.log_evidence - 1e-12);
            REQUIRE(e.log_evidence_distinct <= e.log_evidence + 1e-12);
        }
    }
}

TEST_CASE("exact objective rejects long targets") {
    Model m = toy_model(1);
    EncodedExample ex{{5}, std::vector<int>(kMaxEnumerationLength + 1, 6)};
    CHECK_THROWS_AS(exact_vb_objective(m, ex, false), std::invalid_argument);
}

TEST_CASE("vb_loss gradient with frozen samples matches central differences") {
    Model m = toy_model(8);
    const EncodedExample ex = toy_example();
    const ModelConfig cfg = m.config();
    auto f = [&](Graph& g, std::span<const Var> leaves) {
        Session s(g, cfg, BoundParameters::from_leaves(leaves));
        Rng rng(99);
        VbOptions opts;
        opts.K = 4;
        opts.null_mode = true;
        opts.forced_labels = {labels_of(0b0110, 5), labels_of(0, 5), labels_of(0b1001, 5), labels_of(0b0001, 5)};
        return vb_loss(s, ex, opts, rng).loss;
    };
    const auto ptrs = m.params().tensors();
    const GradCheckResult r = grad_check(f, ptrs, 1e-5, {.zero_tolerance = 1e-4});
    INFO(r.worst_param, " ", r.worst_index, " ", r.worst_analytic, " ", r.worst_numeric);
    CHECK(r.checked > 100);
    CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("Adam minimizes a quadratic and respects frozen tensors") {
    Tensor x = Tensor::Constant(2, 1, 3.0);
    Tensor y = Tensor::Constant(1, 1, -1.0);
    std::vector<Tensor*> params{&x, &y};
    Adam adam(0.1, 0.9, 0.999, 1e-8);
    const bool frozen[] = {false, true};
    std::vector<Tensor> grads{2.0 * x, 2.0 * y};
    adam.step(params, grads, frozen);
    CHECK(x(0, 0) == doctest::Approx(2.9).epsilon(1e-9));
    CHECK(y(0, 0) == -1.0);
    for (int i = 0; i < 2000; ++i) {
        grads = {2.0 * x, 2.0 * y};
        adam.step(params, grads, frozen);
    }
    CHECK(std::abs(x(0, 0)) < 1e-2);
    CHECK(adam.steps() == 2001);
}

TEST_CASE("fit lowers the validation loss and restores the best parameters") {
    ModelConfig cfg = toy_config(12);
    Model m(cfg);
    std::vector<EncodedExample> train, valid;
    Rng rng(2);
    for (int i = 0; i < 12; ++i) {
        EncodedExample ex;
        for (int s = 0; s < 3; ++s) ex.source.push_back(5 + static_cast<int>(rng.below(4)));
        ex.target = {ex.source[0], 3, ex.source[2], 2};
        (i < 9 ? train : valid).push_back(ex);
    }
    TrainConfig tc;
    tc.K = 2;
    tc.learning_rate = 0.05;
    tc.max_epochs = 6;
    tc.patience = 10;
    tc.null_mode = true;
    tc.warmup_epochs = 2;
    std::vector<Objective> seen;
    const TrainReport r = fit(m, train, valid, tc, [&](const EpochRecord& e) { seen.push_back(e.objective); });
    REQUIRE(r.epochs.size() == 6);
    CHECK(seen.front() == Objective::Likelihood);
    CHECK(seen.back() == Objective::Variational);
    CHECK(r.updates == 6 * 9);
    CHECK(r.epochs[1].valid_loss < r.epochs[0].valid_loss);
    const double restored = evaluate_loss(m, valid, tc, Objective::Variational, derive_seed(tc.seed, 0x76616c6964ULL));
    CHECK(restored == doctest::Approx(r.best_valid_loss).epsilon(1e-12));
    CHECK(r.best_epoch > 2);
}

TEST_CASE("fit keeps kappa at zero without calibration and validates its config") {
    Model m(toy_config(13));
    std::vector<EncodedExample> data{toy_example()};
    TrainConfig tc;
    tc.K = 1;
    tc.max_epochs = 2;
    tc.calibration = false;
    tc.learning_rate = 0.05;
    fit(m, data, data, tc);
    CHECK(m.params().kappa(0, 0) == 0.0);
    tc.skip_penalty = -1.0;
    CHECK_THROWS_AS(fit(m, data, data, tc), std::invalid_argument);
    tc = TrainConfig{};
    CHECK_THROWS_AS(fit(m, {}, data, tc), std::invalid_argument);
}
