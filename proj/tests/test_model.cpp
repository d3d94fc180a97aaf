#include "confdec/model.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

using namespace confdec;

namespace {

ModelConfig tiny_config(AttentionMode mode = AttentionMode::Confident, std::uint64_t seed = 1) {
    ModelConfig c;
    c.vocab_size = 9;
    c.embed_dim = c.encoder_hidden = c.decoder_hidden = 4;
    c.base_lm_hidden = 3;
    c.mode = mode;
    c.tokens = {1, 2, 4};
    c.seed = seed;
    return c;
}

// Plain Eigen forward pass, written independently of the graph code.
namespace ref {

Vector sigm(const Vector& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

std::pair<Vector, Vector> lstm(const Tensor& w, const Tensor& b, const Vector& x, const Vector& h, const Vector& c) {
    Vector xh(x.size() + h.size());
    xh << x, h;
    const Vector z = w * xh + b.col(0);
    const Eigen::Index n = h.size();
    const Vector i = sigm(z.segment(0, n));
    const Vector f = sigm(z.segment(n, n));
    const Vector u = z.segment(2 * n, n).array().tanh().matrix();
    const Vector o = sigm(z.segment(3 * n, n));
    const Vector c2 = (f.array() * c.array() + i.array() * u.array()).matrix();
    const Vector h2 = (o.array() * c2.array().tanh()).matrix();
    return {h2, c2};
}

Vector softmax(const Vector& x) {
    const Vector e = (x.array() - x.maxCoeff()).exp().matrix();
    return e / e.sum();
}

Tensor encode(const Parameters& p, const std::vector<int>& src) {
    const Eigen::Index d = p.embedding.cols();
    const std::size_t n = src.size();
    std::vector<Vector> fwd(n), bwd(n);
    Vector h = Vector::Zero(d), c = Vector::Zero(d);
    for (std::size_t s = 0; s < n; ++s) {
        std::tie(h, c) = lstm(p.enc_fwd_w, p.enc_fwd_b, p.embedding.row(src[s]).transpose(), h, c);
        fwd[s] = h;
    }
    h.setZero();
    c.setZero();
    for (std::size_t s = n; s-- > 0;) {
        std::tie(h, c) = lstm(p.enc_bwd_w, p.enc_bwd_b, p.embedding.row(src[s]).transpose(), h, c);
        bwd[s] = h;
    }
    Tensor states(d, static_cast<Eigen::Index>(n));
    for (std::size_t s = 0; s < n; ++s) states.col(static_cast<Eigen::Index>(s)) = fwd[s] + bwd[s];
    return states;
}

struct State {
    Vector h, c, a, g, gc;
    double score = 0.0;
};

struct Out {
    Vector alpha, mixed, base;
    double p_gen, score, tilde;
};

Out step(const Parameters& p, const Tensor& states, const std::vector<int>& src, State& st, int prev) {
    const Vector e = p.embedding.row(prev).transpose();
    auto [h, c] = lstm(p.dec_w, p.dec_b, e, st.h, st.c);
    Vector q(h.size() + st.a.size());
    q << h, st.a;
    const Vector logits = states.transpose() * (p.attn_w * q);
    const Vector ex = logits.array().exp().matrix();
    Out o;
    o.alpha = ex / (1.0 + ex.sum());
    const Vector a = states * o.alpha;
    const Vector v = a + h;
    const Vector gen = softmax(p.embedding * v);
    Vector feats(3 * v.size());
    feats << v, h, e;
    o.p_gen = 1.0 / (1.0 + std::exp(-((p.gen_w * feats)(0) + p.gen_b(0, 0))));
    Vector copy = Vector::Zero(gen.size());
    for (std::size_t s = 0; s < src.size(); ++s) copy(src[s]) += o.alpha(static_cast<Eigen::Index>(s)) / o.alpha.sum();
    o.mixed = o.p_gen * gen + (1.0 - o.p_gen) * copy;
    o.score = a.norm() / (0.5 * (a.norm() + h.norm() + v.norm()) + kScoreEpsilon);
    o.tilde = o.p_gen * o.score + (1.0 - o.p_gen);
    const Vector in = (1.0 - st.score) * e + st.score * p.src_embedding.col(0);
    auto [g, gc] = lstm(p.lm_w, p.lm_b, in, st.g, st.gc);
    o.base = softmax(p.lm_out_w * g + p.lm_out_b.col(0));
    st = {h, c, a, g, gc, o.tilde};
    return o;
}

}  // namespace ref

Vector random_vector(Eigen::Index n, Rng& rng, double scale) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * rng.uniform(-1.0, 1.0);
    return v;
}

}  // namespace

TEST_CASE("confident decoder steps agree with a straight-line recurrence") {
    const ModelConfig cfg = tiny_config();
    Model model(cfg);
    const std::vector<int> src{5, 6, 7, 3, 8};
    const std::vector<int> tgt{1, 7, 3, 2};

    const Parameters& p = model.params();
    const Tensor states = ref::encode(p, src);
    ref::State rs{Vector::Zero(4), Vector::Zero(4), Vector::Zero(4), Vector::Zero(3), Vector::Zero(3), 0.0};

    Graph g;
    Session s(g, model);
    EncoderState enc = s.encode(src);
    CHECK((enc.states.value() - states).cwiseAbs().maxCoeff() < 1e-12);
    StepState st = s.initial_state();
    for (std::size_t t = 0; t + 1 < tgt.size(); ++t) {
        const ref::Out r = ref::step(p, states, src, rs, tgt[t]);
        StepOutput out = s.step(st, tgt[t], enc);
        CHECK((out.alpha.value().col(0) - r.alpha).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((out.mixed_dist.value().col(0) - r.mixed).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((out.base_dist.value().col(0) - r.base).cwiseAbs().maxCoeff() < 1e-12);
        CHECK(out.p_gen.scalar() == doctest::Approx(r.p_gen).epsilon(1e-12));
        CHECK(out.attn_score.scalar() == doctest::Approx(r.score).epsilon(1e-12));
        CHECK(out.attn_tilde.scalar() == doctest::Approx(r.tilde).epsilon(1e-12));
        CHECK(out.mixed_dist.value().sum() == doctest::Approx(1.0).epsilon(1e-12));
        st = out.next;
    }
}

TEST_CASE("confident attention weights sum to less than one, baseline weights to one") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        for (AttentionMode mode : {AttentionMode::Confident, AttentionMode::Baseline}) {
            Model model(tiny_config(mode, 100 + static_cast<std::uint64_t>(trial)));
            std::vector<int> src(1 + rng.below(7));
            for (int& x : src) x = static_cast<int>(rng.below(9));
            Graph g;
            Session s(g, model);
            EncoderState enc = s.encode(src);
            StepState st = s.initial_state();
            int prev = 1;
            for (int t = 0; t < 4; ++t) {
                StepOutput out = s.step(st, prev, enc);
                const double total = out.alpha.value().sum();
                if (mode == AttentionMode::Confident)
                    REQUIRE(total < 1.0);
                else
                    REQUIRE(total == doctest::Approx(1.0).epsilon(1e-12));
                st = out.next;
                prev = static_cast<int>(rng.below(9));
            }
        }
    }
}

TEST_CASE("attention score lies in [0, 1] for arbitrary vectors") {
    Rng rng(23);
    for (int trial = 0; trial < 10000; ++trial) {
        Graph g;
        const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(8));
        const double sa = std::pow(10.0, rng.uniform(-6.0, 3.0));
        const double sh = trial % 97 == 0 ? 0.0 : std::pow(10.0, rng.uniform(-6.0, 3.0));
        const Vector av = random_vector(n, rng, sa);
        const Vector hv = random_vector(n, rng, sh);
        Var a = g.constant(av), h = g.constant(hv);
        const AttentionScore as = attention_score(a, h, a + h, g.scalar(rng.uniform()));
        REQUIRE(as.score.scalar() >= 0.0);
        REQUIRE(as.score.scalar() <= 1.0);
        REQUIRE(as.tilde.scalar() >= as.score.scalar() - 1e-15);
        REQUIRE(as.tilde.scalar() <= 1.0);
    }
    Graph g;
    Var z = g.constant(Tensor::Zero(3, 1));
    CHECK(attention_score(z, z, z, g.scalar(1.0)).score.scalar() == 0.0);
}

TEST_CASE("calibration with kappa zero returns the mixture unchanged") {
    Rng rng(29);
    for (int trial = 0; trial < 200; ++trial) {
        Graph g;
        Vector p = random_vector(6, rng, 1.0).cwiseAbs();
        p /= p.sum();
        Vector c = random_vector(6, rng, 1.0).cwiseAbs();
        const Calibrated cal = calibrate(g.constant(p), g.constant(c), g.scalar(0.0));
        REQUIRE((cal.probs.value().col(0) - p).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("calibration sharpens toward confident tokens as kappa grows") {
    Graph g;
    Vector p(2), c(2);
    p << 0.5, 0.5;
    c << 0.9, 0.1;
    const double lo = calibrate(g.constant(p), g.constant(c), g.scalar(0.5)).probs.value()(0, 0);
    const double hi = calibrate(g.constant(p), g.constant(c), g.scalar(2.0)).probs.value()(0, 0);
    CHECK(lo == doctest::Approx(std::sqrt(0.9) / (std::sqrt(0.9) + std::sqrt(0.1))));
    CHECK(hi > lo);
}

TEST_CASE("confidence identity and vector form") {
    Graph g;
    Vector pb(3);
    pb << 0.2, 0.3, 0.5;
    const Vector c = confidence(g.scalar(0.4), g.constant(pb)).value().col(0);
    for (int i = 0; i < 3; ++i) CHECK(c(i) == doctest::Approx(0.4 + 0.6 * pb(i)).epsilon(1e-15));
}

TEST_CASE("confident decoder state does not depend on the encoder") {
    Model model(tiny_config());
    const std::vector<int> src{5, 6, 7, 8};
    const std::vector<int> prefix{1, 6, 3, 7, 5};
    Graph g;
    Session s(g, model);
    EncoderState enc = s.encode(src);
    EncoderState blank = s.zeroed(enc);
    StepState a = s.initial_state(), b = s.initial_state();
    for (std::size_t t = 0; t < prefix.size(); ++t) {
        StepOutput oa = s.step(a, prefix[t], enc);
        StepOutput ob = s.step(b, prefix[t], t % 2 == 0 ? blank : enc);
        REQUIRE((oa.hidden.value() - ob.hidden.value()).cwiseAbs().maxCoeff() == 0.0);
        a = oa.next;
        b = ob.next;
    }
}

TEST_CASE("baseline decoder state does depend on the encoder") {
    Model model(tiny_config(AttentionMode::Baseline));
    const std::vector<int> src{5, 6, 7, 8};
    Graph g;
    Session s(g, model);
    EncoderState enc = s.encode(src);
    EncoderState blank = s.zeroed(enc);
    StepOutput o1 = s.step(s.initial_state(), 1, enc);
    StepOutput o2 = s.step(o1.next, 6, enc);
    StepOutput z2 = s.step(s.step(s.initial_state(), 1, blank).next, 6, enc);
    CHECK((o2.hidden.value() - z2.hidden.value()).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("copy gate forced to one leaves the generator distribution") {
    Model model(tiny_config());
    Graph g;
    Session s(g, model);
    EncoderState enc = s.encode(std::vector<int>{5, 6});
    StepOutput out = s.step(s.initial_state(), 1, enc, {.force_p_gen = 1.0});
    CHECK((out.mixed_dist.value() - out.gen_dist.value()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(out.attn_tilde.scalar() == doctest::Approx(out.attn_score.scalar()));
}

TEST_CASE("model log-likelihood gradient matches central differences") {
    ModelConfig cfg = tiny_config();
    cfg.embed_dim = cfg.encoder_hidden = cfg.decoder_hidden = 3;
    cfg.base_lm_hidden = 2;
    Model model(cfg);
    const std::vector<int> src{5, 6, 7};
    const std::vector<int> tgt{7, 3, 2};
    auto f = [&](Graph& g, std::span<const Var> leaves) {
        Session s(g, cfg, BoundParameters::from_leaves(leaves));
        EncoderState enc = s.encode(src);
        StepState st = s.initial_state();
        int prev = cfg.tokens.bos;
        Var loss = g.scalar(0.0);
        for (int y : tgt) {
            StepOutput out = s.step(st, prev, enc);
            Var c = s.token_confidence(out, y);
            Calibrated cal = calibrate(out.mixed_dist, s.confidence_vector(out), s.bound().kappa);
            loss = loss - log(pick(out.mixed_dist, y)) - log(pick(out.base_dist, y)) - log(c) - pick(cal.log_probs, y);
            st = out.next;
            prev = y;
        }
        return loss;
    };
    Parameters& p = model.params();
    p.kappa(0, 0) = 0.7;
    const auto ptrs = p.tensors();
    const GradCheckResult r = grad_check(f, ptrs, 1e-5, {.zero_tolerance = 1e-4});
    INFO(r.worst_param, " ", r.worst_index, " ", r.worst_analytic, " ", r.worst_numeric);
    CHECK(r.checked > 100);
    CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("config validation") {
    ModelConfig c = tiny_config();
    c.decoder_hidden = 5;
    CHECK_THROWS_AS(Model{c}, std::invalid_argument);
    c = tiny_config();
    c.tokens.eos = 99;
    CHECK_THROWS_AS(Model{c}, std::invalid_argument);
    c = tiny_config();
    CHECK_NOTHROW(Model{c});
    CHECK(parse_attention_mode(to_string(AttentionMode::Baseline)) == AttentionMode::Baseline);
    CHECK_THROWS(parse_attention_mode("nope"));
}

TEST_CASE("checkpoint round trip and corruption") {
    const auto dir = std::filesystem::temp_directory_path() / "confdec_model_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "m.ckpt").string();
    Model model(tiny_config(AttentionMode::Baseline, 5));
    model.params().kappa(0, 0) = 0.25;
    save_checkpoint(path, model, 42, {{"vocab", "a b c"}, {"note", "x=y"}});
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.step == 42);
    CHECK(ck.metadata.at("vocab") == "a b c");
    CHECK(ck.metadata.at("note") == "x=y");
    CHECK(ck.config.mode == AttentionMode::Baseline);
    const auto a = model.params().named();
    const auto b = ck.params.named();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(*a[i].second == *b[i].second);
    }

    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 16);
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), CheckpointError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("length penalty") {
    CHECK(length_penalty(7, 0.0) == 1.0);
    CHECK(length_penalty(1, 1.0) == doctest::Approx(1.0));
    CHECK(length_penalty(7, 0.5) == doctest::Approx(std::sqrt(2.0)));
}
