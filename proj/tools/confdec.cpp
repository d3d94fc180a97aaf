// confdec: synthesize corpora, train, generate, evaluate, trace and probe.

#include "confdec/data.hpp"
#include "confdec/decoding.hpp"
#include "confdec/metrics.hpp"
#include "confdec/model.hpp"
#include "confdec/training.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace confdec;

namespace {

struct RuntimeFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw RuntimeFailure("cannot create output directory '" + dir + "': " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write '" + path.string() + "'");
    return out;
}

void echo_config(const CLI::App& sub, const std::string& out_dir) {
    auto out = open_out(fs::path(out_dir) / (sub.get_name() + ".config"));
    out << sub.config_to_str(true, false);
}

struct Loaded {
    Model model;
    Vocabulary vocab;
    std::uint64_t step;
};

Loaded load_model(const std::string& path) {
    if (!fs::exists(path)) throw RuntimeFailure("checkpoint not found: " + path);
    Checkpoint ck = load_checkpoint(path);
    Vocabulary vocab;
    auto it = ck.metadata.find("vocab");
    if (it == ck.metadata.end()) throw RuntimeFailure("checkpoint carries no vocabulary: " + path);
    const auto tokens = tokenize(it->second);
    if (tokens.size() < Vocabulary::kReservedCount) throw RuntimeFailure("checkpoint vocabulary is truncated");
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i < Vocabulary::kReservedCount) {
            if (tokens[i] != Vocabulary::reserved()[i]) throw RuntimeFailure("checkpoint vocabulary has a bad reserved block");
        } else {
            vocab.add(tokens[i]);
        }
    }
    if (static_cast<int>(vocab.size()) != ck.config.vocab_size)
        throw RuntimeFailure("checkpoint vocabulary size does not match the model");
    return {Model(ck.config, std::move(ck.params)), std::move(vocab), ck.step};
}

std::vector<EncodedExample> encode_all(const Dataset& data, const Vocabulary& vocab) {
    std::vector<EncodedExample> out;
    out.reserve(data.size());
    for (const auto& ex : data) out.push_back(encode_example(ex, vocab));
    return out;
}

std::vector<TokenSeq> read_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw RuntimeFailure("cannot read predictions '" + path + "'");
    std::vector<TokenSeq> out;
    for (std::string line; std::getline(in, line);) out.push_back(tokenize(line));
    return out;
}

// ---- options ----------------------------------------------------------------

struct SynthOpts {
    std::size_t n = 2000, n_valid = 200, n_test = 200;
    double divergence = 0.3;
    double realize = 0.85;
    std::uint64_t seed = 7;
    std::string out = "data";
};

struct TrainOpts {
    std::string train, valid, out = "run";
    int embed_dim = 32, hidden = 32, base_lm_hidden = 32;
    std::string mode = "confident";
    bool no_copy = false;
    std::size_t max_vocab = 512;
    std::uint64_t seed = 1;
    TrainConfig tc;
    std::string objective = "variational";
    bool baseline = false, no_confidence = false, no_variational = false, no_calibration = false;
    bool no_base_lm = false;
};

struct DecodeOpts {
    std::string model, data, out = "run";
    DecodeConfig dc;
    double null_threshold = -1.0;
    bool no_calibration = false;
};

struct EvalOpts {
    std::string data, predictions, model, out = "run";
};

struct TraceOpts {
    std::string model, data, out = "run";
    std::size_t index = 0;
    bool all = false;
};

struct ProbeOpts {
    std::string model, data, out = "run";
    std::vector<double> ps{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
    std::size_t trials = 5;
    std::size_t limit = 0;
    DecodeConfig dc;
};

void add_decode_options(CLI::App* sub, DecodeConfig& dc) {
    sub->add_option("--beam", dc.beam_size, "Beam size")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--max-len", dc.max_len, "Maximum emitted tokens")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--seed", dc.seed, "Seed")->capture_default_str();
}

// ---- subcommands -----------------------------------------------------------

int run_synth(const SynthOpts& o, const CLI::App& sub) {
    SynthConfig sc;
    sc.num_train = o.n;
    sc.num_valid = o.n_valid;
    sc.num_test = o.n_test;
    sc.divergence_rate = o.divergence;
    sc.realize_prob = o.realize;
    sc.seed = o.seed;
    const SyntheticCorpus corpus = generate_synthetic(sc);
    ensure_dir(o.out);
    save_dataset((fs::path(o.out) / "train.jsonl").string(), corpus.train);
    save_dataset((fs::path(o.out) / "valid.jsonl").string(), corpus.valid);
    save_dataset((fs::path(o.out) / "test.jsonl").string(), corpus.test);
    echo_config(sub, o.out);
    std::cout << "wrote " << corpus.train.size() << "/" << corpus.valid.size() << "/" << corpus.test.size()
              << " examples to " << o.out << "\n";
    return 0;
}

int run_train(TrainOpts o, const CLI::App& sub) {
    ModelConfig mc;
    mc.embed_dim = o.embed_dim;
    mc.encoder_hidden = o.hidden;
    mc.decoder_hidden = o.hidden;
    mc.base_lm_hidden = o.base_lm_hidden;
    mc.mode = parse_attention_mode(o.mode);
    mc.copy_enabled = !o.no_copy;
    mc.seed = o.seed;
    TrainConfig tc = o.tc;
    tc.seed = o.seed;
    tc.objective = parse_objective(o.objective);
    tc.train_base_lm = !o.no_base_lm;
    if (o.baseline) {
        mc.mode = AttentionMode::Baseline;
        tc.objective = Objective::Likelihood;
        tc.train_base_lm = false;
        tc.calibration = false;
    }
    if (o.no_confidence) mc.confidence_source = ConfidenceSource::Probability;
    if (o.no_variational) tc.objective = Objective::Likelihood;
    if (o.no_calibration) tc.calibration = false;

    const Dataset train = load_dataset(o.train);
    const Dataset valid = load_dataset(o.valid);
    const Vocabulary vocab = build_vocab(train, o.max_vocab);
    mc.vocab_size = static_cast<int>(vocab.size());
    mc.tokens = vocab.special();

    ensure_dir(o.out);
    echo_config(sub, o.out);
    auto log = open_out(fs::path(o.out) / "train.log");
    Model model(mc);
    const auto tr = encode_all(train, vocab);
    const auto va = encode_all(valid, vocab);
    log << "# mode=" << to_string(mc.mode) << " confidence=" << to_string(mc.confidence_source)
        << " objective=" << to_string(tc.objective) << " null_mode=" << tc.null_mode << " calibration=" << tc.calibration
        << " base_lm=" << tc.train_base_lm << " vocab=" << vocab.size() << " params=" << model.params().count() << "\n";
    const TrainReport report = fit(model, tr, va, tc, [&](const EpochRecord& r) {
        log << r << std::endl;
        std::cout << r << std::endl;
    });
    log << "# best_epoch=" << report.best_epoch << " best_valid_loss=" << report.best_valid_loss
        << " updates=" << report.updates << " stopped_early=" << report.stopped_early << "\n";

    std::map<std::string, std::string> meta;
    meta["vocab"] = join_tokens(vocab.tokens());
    meta["objective"] = to_string(tc.objective);
    meta["null_mode"] = tc.null_mode ? "1" : "0";
    meta["best_epoch"] = std::to_string(report.best_epoch);
    save_checkpoint((fs::path(o.out) / "model.ckpt").string(), model, report.updates, meta);
    const ConfidenceParams cp = model.params().confidence();
    std::cout << "saved " << (fs::path(o.out) / "model.ckpt").string() << " rho=" << cp.rho << " gamma=" << cp.gamma
              << " kappa=" << cp.kappa << "\n";
    return 0;
}

DecodeConfig effective_decode(const DecodeOpts& o) {
    DecodeConfig dc = o.dc;
    if (o.null_threshold >= 0.0) dc.null_threshold = o.null_threshold;
    dc.use_calibration = !o.no_calibration;
    return dc;
}

int run_generate(const DecodeOpts& o, const CLI::App& sub) {
    Loaded m = load_model(o.model);
    const Dataset data = load_dataset(o.data);
    const DecodeConfig dc = effective_decode(o);
    ensure_dir(o.out);
    echo_config(sub, o.out);
    auto preds = open_out(fs::path(o.out) / "predictions.txt");
    auto emis = open_out(fs::path(o.out) / "emissions.txt");
    std::size_t forced = 0;
    for (const auto& ex : data) {
        const DecodeResult r = beam_search(m.model, encode_example(ex, m.vocab).source, dc);
        preds << join_tokens(m.vocab.decode(r.tokens)) << '\n';
        emis << join_tokens(m.vocab.decode(r.emission)) << (r.finished ? "" : " [max_len]") << '\n';
        if (!r.finished) ++forced;
    }
    std::cout << "decoded " << data.size() << " examples (" << forced << " stopped at max_len)\n";
    return 0;
}

int run_evaluate(const EvalOpts& o, const CLI::App& sub) {
    const Dataset data = load_dataset(o.data);
    const auto preds = read_predictions(o.predictions);
    MetricsReport report = evaluate_predictions(preds, data);
    if (!o.model.empty()) {
        Loaded m = load_model(o.model);
        std::vector<ScoredToken> tokens;
        for (const auto& ex : data) {
            if (ex.support.empty()) continue;
            const EncodedExample enc = encode_example(ex, m.vocab);
            const auto rows = trace(m.model, enc.source, enc.target);
            for (std::size_t t = 0; t < ex.support.size(); ++t)
                tokens.push_back({rows[t].confidence, rows[t].score, ex.support[t]});
        }
        if (!tokens.empty()) report.confidence = confidence_diagnostics(tokens);
    }
    ensure_dir(o.out);
    echo_config(sub, o.out);
    open_out(fs::path(o.out) / "metrics.json") << report.to_json() << '\n';
    std::cout << report.to_text();
    return 0;
}

int run_trace(const TraceOpts& o, const CLI::App& sub) {
    Loaded m = load_model(o.model);
    const Dataset data = load_dataset(o.data);
    if (!o.all && o.index >= data.size())
        throw RuntimeFailure("example index " + std::to_string(o.index) + " out of range (" + std::to_string(data.size()) +
                             " examples)");
    ensure_dir(o.out);
    echo_config(sub, o.out);
    auto out = open_out(fs::path(o.out) / "trace.tsv");
    out << "token\tA\tP_B\tC\n" << std::setprecision(6) << std::fixed;
    const std::size_t lo = o.all ? 0 : o.index;
    const std::size_t hi = o.all ? data.size() : o.index + 1;
    for (std::size_t i = lo; i < hi; ++i) {
        if (i > lo) out << '\n';
        const EncodedExample enc = encode_example(data[i], m.vocab);
        for (const TraceRow& r : trace(m.model, enc.source, enc.target))
            out << m.vocab.token(r.token) << '\t' << r.score << '\t' << r.base_prob << '\t' << r.confidence << '\n';
    }
    return 0;
}

int run_probe(const ProbeOpts& o, const CLI::App& sub) {
    Loaded m = load_model(o.model);
    Dataset data = load_dataset(o.data);
    if (o.limit > 0 && data.size() > o.limit) data.resize(o.limit);
    const auto enc = encode_all(data, m.vocab);
    ensure_dir(o.out);
    echo_config(sub, o.out);
    auto out = open_out(fs::path(o.out) / "probe.csv");
    out << "p,mean_changed,stddev\n";
    for (double p : o.ps) {
        const ProbeResult r = source_sensitivity_probe(m.model, enc, p, o.trials, o.dc);
        out << p << ',' << r.mean_changed << ',' << r.stddev << '\n';
        std::cout << "p=" << p << " changed=" << r.mean_changed << " +- " << r.stddev << "\n";
    }
    return 0;
}

int run_inspect(const std::string& path) {
    Loaded m = load_model(path);
    const ModelConfig& c = m.model.config();
    const ConfidenceParams cp = m.model.params().confidence();
    std::cout << "mode            " << to_string(c.mode) << "\n"
              << "copy            " << (c.copy_enabled ? "on" : "off") << "\n"
              << "confidence      " << to_string(c.confidence_source) << "\n"
              << "vocab_size      " << c.vocab_size << "\n"
              << "embed_dim       " << c.embed_dim << "\n"
              << "encoder_hidden  " << c.encoder_hidden << "\n"
              << "decoder_hidden  " << c.decoder_hidden << "\n"
              << "base_lm_hidden  " << c.base_lm_hidden << "\n"
              << "parameters      " << m.model.params().count() << "\n"
              << "step            " << m.step << "\n"
              << "rho             " << cp.rho << "\n"
              << "gamma           " << cp.gamma << "\n"
              << "kappa           " << cp.kappa << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Confident decoding for data-to-text generation"};
    app.require_subcommand(1);

    SynthOpts so;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic divergence corpus");
    synth->set_config("--config");
    synth->add_option("--n", so.n, "Training examples")->capture_default_str();
    synth->add_option("--n-valid", so.n_valid, "Validation examples")->capture_default_str();
    synth->add_option("--n-test", so.n_test, "Test examples")->capture_default_str();
    synth->add_option("--divergence", so.divergence, "Fraction of divergent references")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    synth->add_option("--realize", so.realize, "Probability of mentioning a present field")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    synth->add_option("--seed", so.seed, "Seed")->capture_default_str();
    synth->add_option("--out", so.out, "Output directory")->capture_default_str();

    TrainOpts to;
    auto* train = app.add_subcommand("train", "Train a model");
    train->set_config("--config");
    train->add_option("--train", to.train, "Training JSONL")->required();
    train->add_option("--valid", to.valid, "Validation JSONL")->required();
    train->add_option("--out", to.out, "Output directory")->capture_default_str();
    train->add_option("--embed-dim", to.embed_dim, "Embedding size")->capture_default_str()->check(CLI::PositiveNumber);
    train->add_option("--hidden", to.hidden, "Encoder and decoder hidden size (must equal --embed-dim)")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train->add_option("--base-lm-hidden", to.base_lm_hidden, "Base LM hidden size")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    train->add_option("--mode", to.mode, "Attention mode")
        ->capture_default_str()
        ->check(CLI::IsMember({"baseline", "confident"}));
    train->add_flag("--no-copy", to.no_copy, "Disable the copy mechanism");
    train->add_option("--max-vocab", to.max_vocab, "Vocabulary size including reserved tokens (0 = unlimited)")
        ->capture_default_str();
    train->add_option("--seed", to.seed, "Seed")->capture_default_str();
    train->add_option("--K", to.tc.K, "Monte Carlo samples")->capture_default_str()->check(CLI::PositiveNumber);
    train->add_option("--lr", to.tc.learning_rate, "Adam learning rate")->capture_default_str();
    train->add_option("--batch-size", to.tc.batch_size, "Examples per update")->capture_default_str();
    train->add_option("--epochs", to.tc.max_epochs, "Maximum epochs")->capture_default_str();
    train->add_option("--patience", to.tc.patience, "Early-stopping patience in epochs")->capture_default_str();
    train->add_option("--objective", to.objective, "Training objective")
        ->capture_default_str()
        ->check(CLI::IsMember({"variational", "likelihood"}));
    train->add_option("--warmup-epochs", to.tc.warmup_epochs, "Likelihood epochs before the main objective")
        ->capture_default_str();
    train->add_option("--skip-penalty", to.tc.skip_penalty, "Cost per skipped target position")->capture_default_str();
    train->add_flag("--null-mode", to.tc.null_mode, "Replace skip runs by <null> during sampling");
    train->add_option("--input-dropout", to.tc.input_dropout, "Input dropout rate")->capture_default_str();
    train->add_option("--recurrent-dropout", to.tc.recurrent_dropout, "Recurrent dropout rate")->capture_default_str();
    train->add_flag("--no-base-lm", to.no_base_lm, "Drop the -log P_B(z) term");
    train->add_flag("--baseline", to.baseline, "Pointer-generator baseline: baseline attention, likelihood, no confidence terms");
    train->add_flag("--no-confidence", to.no_confidence, "Use P~(y) as the confidence score");
    train->add_flag("--no-variational", to.no_variational, "Train by plain likelihood, keep calibration");
    train->add_flag("--no-calibration", to.no_calibration, "Freeze kappa at 0");

    DecodeOpts go;
    auto* generate = app.add_subcommand("generate", "Decode a dataset");
    generate->set_config("--config");
    generate->add_option("--model", go.model, "Checkpoint")->required();
    generate->add_option("--data", go.data, "Dataset JSONL")->required();
    generate->add_option("--out", go.out, "Output directory")->capture_default_str();
    add_decode_options(generate, go.dc);
    generate->add_option("--lp", go.dc.length_penalty_alpha, "Length penalty alpha (0 = off)")->capture_default_str();
    generate->add_option("--null-threshold", go.null_threshold, "Confidence threshold for <null> (negative = off)")
        ->capture_default_str()
        ->check(CLI::Range(-1.0, 1.0));
    generate->add_flag("--no-calibration", go.no_calibration, "Score with P~ instead of the calibrated distribution");

    EvalOpts eo;
    auto* evaluate = app.add_subcommand("evaluate", "Score predictions");
    evaluate->set_config("--config");
    evaluate->add_option("--data", eo.data, "Dataset JSONL")->required();
    evaluate->add_option("--predictions", eo.predictions, "One prediction per line")->required();
    evaluate->add_option("--model", eo.model, "Checkpoint for confidence diagnostics");
    evaluate->add_option("--out", eo.out, "Output directory")->capture_default_str();

    TraceOpts tro;
    auto* tr = app.add_subcommand("trace", "Per-token scores of references");
    tr->set_config("--config");
    tr->add_option("--model", tro.model, "Checkpoint")->required();
    tr->add_option("--data", tro.data, "Dataset JSONL")->required();
    tr->add_option("--index", tro.index, "Example index")->capture_default_str();
    tr->add_flag("--all", tro.all, "Trace every example, blank line between examples");
    tr->add_option("--out", tro.out, "Output directory")->capture_default_str();

    ProbeOpts po;
    auto* probe = app.add_subcommand("probe", "Source-zeroing sensitivity probe");
    probe->set_config("--config");
    probe->add_option("--model", po.model, "Checkpoint")->required();
    probe->add_option("--data", po.data, "Dataset JSONL")->required();
    probe->add_option("--p", po.ps, "Zeroing probabilities")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    probe->add_option("--trials", po.trials, "Trials per probability")->capture_default_str()->check(CLI::PositiveNumber);
    probe->add_option("--limit", po.limit, "Use only the first N examples (0 = all)")->capture_default_str();
    add_decode_options(probe, po.dc);
    probe->add_option("--out", po.out, "Output directory")->capture_default_str();

    std::string inspect_path;
    auto* inspect = app.add_subcommand("inspect", "Summarize a checkpoint");
    inspect->add_option("checkpoint", inspect_path, "Checkpoint path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*synth) return run_synth(so, *synth);
        if (*train) return run_train(to, *train);
        if (*generate) return run_generate(go, *generate);
        if (*evaluate) return run_evaluate(eo, *evaluate);
        if (*tr) return run_trace(tro, *tr);
        if (*probe) return run_probe(po, *probe);
        if (*inspect) return run_inspect(inspect_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
