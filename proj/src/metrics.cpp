#include "confdec/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace confdec {

namespace {

constexpr int kMaxOrder = 4;

using NGram = std::vector<std::string>;

std::map<NGram, int> ngram_counts(const TokenSeq& s, int n) {
    std::map<NGram, int> out;
    if (static_cast<int>(s.size()) < n) return out;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i)
        ++out[NGram(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i) + n)];
    return out;
}

std::set<std::string> table_values(const SourceTable& table) {
    std::set<std::string> out;
    for (const Field& f : table.fields) out.insert(f.value.begin(), f.value.end());
    return out;
}

bool all_in(const NGram& g, const std::set<std::string>& vocab) {
    return std::all_of(g.begin(), g.end(), [&](const std::string& t) { return vocab.count(t) > 0; });
}

/// Geometric mean of the defined ratios; nullopt when none is defined.
std::optional<double> geometric_mean(const std::vector<double>& ratios) {
    if (ratios.empty()) return std::nullopt;
    double log_sum = 0.0;
    for (double r : ratios) {
        if (r <= 0.0) return 0.0;
        log_sum += std::log(r);
    }
    return std::exp(log_sum / static_cast<double>(ratios.size()));
}

}  // namespace

double bleu(const std::vector<TokenSeq>& predictions, const std::vector<TokenSeq>& references, bool smoothing) {
    if (predictions.empty()) throw std::invalid_argument("bleu: empty corpus");
    if (predictions.size() != references.size()) throw std::invalid_argument("bleu: predictions and references differ in count");
    std::array<double, kMaxOrder> matched{};
    std::array<double, kMaxOrder> total{};
    double hyp_len = 0.0;
    double ref_len = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        hyp_len += static_cast<double>(predictions[i].size());
        ref_len += static_cast<double>(references[i].size());
        for (int n = 1; n <= kMaxOrder; ++n) {
            const auto hyp = ngram_counts(predictions[i], n);
            const auto ref = ngram_counts(references[i], n);
            for (const auto& [g, c] : hyp) {
                total[n - 1] += c;
                auto it = ref.find(g);
                if (it != ref.end()) matched[n - 1] += std::min(c, it->second);
            }
        }
    }
    if (hyp_len == 0.0) return 0.0;
    double log_precision = 0.0;
    for (int n = 0; n < kMaxOrder; ++n) {
        double m = matched[n];
        double t = total[n];
        if (smoothing && n > 0) {
            m += 1.0;
            t += 1.0;
        }
        if (m == 0.0 || t == 0.0) return 0.0;
        log_precision += std::log(m / t) / kMaxOrder;
    }
    const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
    return bp * std::exp(log_precision);
}

double harmonic_mean(double a, double b) { return a + b > 0.0 ? 2.0 * a * b / (a + b) : 0.0; }

ExamplePrf table_grounded_example(const TokenSeq& prediction, const TokenSeq& reference, const SourceTable& table) {
    ExamplePrf out;
    const std::set<std::string> values = table_values(table);

    if (prediction.empty()) {
        out.empty = true;
    } else {
        std::vector<double> ratios;
        for (int n = 1; n <= kMaxOrder; ++n) {
            const auto hyp = ngram_counts(prediction, n);
            if (hyp.empty()) continue;
            const auto ref = ngram_counts(reference, n);
            double entailed = 0.0, count = 0.0;
            for (const auto& [g, c] : hyp) {
                count += c;
                if (ref.count(g) > 0 || all_in(g, values)) entailed += c;
            }
            ratios.push_back(entailed / count);
        }
        out.precision = geometric_mean(ratios).value_or(0.0);
    }

    std::vector<double> ref_ratios;
    for (int n = 1; n <= kMaxOrder; ++n) {
        const auto ref = ngram_counts(reference, n);
        const auto hyp = ngram_counts(prediction, n);
        double hit = 0.0, count = 0.0;
        for (const auto& [g, c] : ref) {
            if (!all_in(g, values)) continue;
            count += c;
            if (hyp.count(g) > 0) hit += c;
        }
        if (count > 0.0) ref_ratios.push_back(hit / count);
    }
    const std::optional<double> r_ref = geometric_mean(ref_ratios);
    std::optional<double> r_tab;
    if (!values.empty()) {
        const std::set<std::string> predicted(prediction.begin(), prediction.end());
        double hit = 0.0;
        for (const auto& v : values) hit += predicted.count(v) > 0 ? 1.0 : 0.0;
        r_tab = hit / static_cast<double>(values.size());
    }
    if (r_ref && r_tab) out.recall = std::pow(*r_ref, 1.0 - kTableRecallWeight) * std::pow(*r_tab, kTableRecallWeight);
    else if (r_ref) out.recall = *r_ref;
    else if (r_tab) out.recall = *r_tab;
    else out.recall = 1.0;
    return out;
}

PrfScore table_grounded_prf(const std::vector<TokenSeq>& predictions, const std::vector<TokenSeq>& references,
                            const std::vector<SourceTable>& tables) {
    if (predictions.empty()) throw std::invalid_argument("table_grounded_prf: empty corpus");
    if (predictions.size() != references.size() || predictions.size() != tables.size())
        throw std::invalid_argument("table_grounded_prf: inputs differ in count");
    PrfScore out;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const ExamplePrf e = table_grounded_example(predictions[i], references[i], tables[i]);
        out.precision += e.precision;
        out.recall += e.recall;
        if (e.empty) ++out.empty_predictions;
    }
    const double n = static_cast<double>(predictions.size());
    out.precision /= n;
    out.recall /= n;
    out.f1 = harmonic_mean(out.precision, out.recall);
    return out;
}

std::optional<double> rank_auc(const std::vector<double>& positives, const std::vector<double>& negatives) {
    if (positives.empty() || negatives.empty()) return std::nullopt;
    struct Item {
        double v;
        bool negative;
    };
    std::vector<Item> all;
    all.reserve(positives.size() + negatives.size());
    for (double v : positives) all.push_back({v, false});
    for (double v : negatives) all.push_back({v, true});
    std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.v < b.v; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < all.size();) {
        std::size_t j = i;
        while (j < all.size() && all[j].v == all[i].v) ++j;
        const double mid = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (all[k].negative) rank_sum += mid;
        i = j;
    }
    const double nn = static_cast<double>(negatives.size());
    const double np = static_cast<double>(positives.size());
    return (rank_sum - nn * (nn + 1.0) / 2.0) / (nn * np);
}

ConfidenceDiagnostics confidence_diagnostics(const std::vector<ScoredToken>& tokens) {
    std::vector<double> c_sup, c_uns, c_tpl, s_sup, s_tpl;
    for (const ScoredToken& t : tokens) {
        switch (t.label) {
            case SupportLabel::Supported:
                c_sup.push_back(t.confidence);
                s_sup.push_back(t.score);
                break;
            case SupportLabel::Unsupported: c_uns.push_back(t.confidence); break;
            case SupportLabel::Template:
                c_tpl.push_back(t.confidence);
                s_tpl.push_back(t.score);
                break;
        }
    }
    auto mean = [](const std::vector<double>& xs) -> std::optional<double> {
        if (xs.empty()) return std::nullopt;
        double s = 0.0;
        for (double x : xs) s += x;
        return s / static_cast<double>(xs.size());
    };
    ConfidenceDiagnostics d;
    d.supported = c_sup.size();
    d.unsupported = c_uns.size();
    d.templatic = c_tpl.size();
    d.mean_c_supported = mean(c_sup);
    d.mean_c_unsupported = mean(c_uns);
    d.mean_c_template = mean(c_tpl);
    d.mean_score_supported = mean(s_sup);
    d.mean_score_template = mean(s_tpl);
    std::vector<double> rest = c_sup;
    rest.insert(rest.end(), c_tpl.begin(), c_tpl.end());
    d.auc = rank_auc(c_uns, rest);
    d.auc_vs_supported = rank_auc(c_uns, c_sup);
    return d;
}

MetricsReport evaluate_predictions(const std::vector<TokenSeq>& predictions, const Dataset& data) {
    if (predictions.size() != data.size())
        throw std::invalid_argument("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                                    std::to_string(data.size()) + " examples");
    std::vector<TokenSeq> refs;
    std::vector<SourceTable> tables;
    for (const Example& ex : data) {
        refs.push_back(ex.reference);
        tables.push_back(ex.table);
    }
    MetricsReport r;
    r.examples = data.size();
    r.bleu = bleu(predictions, refs);
    const PrfScore prf = table_grounded_prf(predictions, refs, tables);
    r.table_precision = prf.precision;
    r.table_recall = prf.recall;
    r.table_f1 = prf.f1;
    r.empty_predictions = prf.empty_predictions;
    double len = 0.0;
    for (const auto& p : predictions) len += static_cast<double>(p.size());
    r.avg_len = len / static_cast<double>(predictions.size());
    return r;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string optional_text(const std::optional<double>& v) {
    if (!v) return "absent";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << *v;
    return os.str();
}

}  // namespace

std::string MetricsReport::to_json() const {
    nlohmann::json j;
    j["examples"] = examples;
    j["bleu"] = bleu;
    j["table_precision"] = table_precision;
    j["table_recall"] = table_recall;
    j["table_f1"] = table_f1;
    j["avg_len"] = avg_len;
    j["empty_predictions"] = empty_predictions;
    if (confidence) {
        const ConfidenceDiagnostics& d = *confidence;
        j["confidence"] = {{"supported_tokens", d.supported},
                           {"unsupported_tokens", d.unsupported},
                           {"template_tokens", d.templatic},
                           {"mean_c_supported", optional_json(d.mean_c_supported)},
                           {"mean_c_unsupported", optional_json(d.mean_c_unsupported)},
                           {"mean_c_template", optional_json(d.mean_c_template)},
                           {"mean_score_supported", optional_json(d.mean_score_supported)},
                           {"mean_score_template", optional_json(d.mean_score_template)},
                           {"auc", optional_json(d.auc)},
                           {"auc_vs_supported", optional_json(d.auc_vs_supported)}};
    }
    return j.dump(2);
}

std::string MetricsReport::to_text() const {
    std::vector<std::pair<std::string, std::string>> rows;
    auto fmt = [](double v) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(4) << v;
        return os.str();
    };
    rows.emplace_back("examples", std::to_string(examples));
    rows.emplace_back("bleu", fmt(bleu));
    rows.emplace_back("table precision", fmt(table_precision));
    rows.emplace_back("table recall", fmt(table_recall));
    rows.emplace_back("table f1", fmt(table_f1));
    rows.emplace_back("avg len", fmt(avg_len));
    rows.emplace_back("empty predictions", std::to_string(empty_predictions));
    if (confidence) {
        rows.emplace_back("mean C supported", optional_text(confidence->mean_c_supported));
        rows.emplace_back("mean C unsupported", optional_text(confidence->mean_c_unsupported));
        rows.emplace_back("mean C template", optional_text(confidence->mean_c_template));
        rows.emplace_back("mean score supported", optional_text(confidence->mean_score_supported));
        rows.emplace_back("mean score template", optional_text(confidence->mean_score_template));
        rows.emplace_back("confidence AUC", optional_text(confidence->auc));
        rows.emplace_back("AUC vs supported", optional_text(confidence->auc_vs_supported));
    }
    std::size_t width = 0;
    for (const auto& [k, v] : rows) width = std::max(width, k.size());
    std::ostringstream os;
    for (const auto& [k, v] : rows) os << std::left << std::setw(static_cast<int>(width) + 2) << k << v << '\n';
    return os.str();
}

}  // namespace confdec
