#pragma once

// Corpus BLEU, table-grounded precision/recall/F1 and confidence diagnostics.

#include "confdec/data.hpp"

#include <optional>
#include <string>
#include <vector>

namespace confdec {

using TokenSeq = std::vector<std::string>;

/// Corpus BLEU-4 with brevity penalty. `smoothing` adds one to the matched and total
/// counts of orders 2..4. Throws std::invalid_argument for an empty or misaligned corpus.
double bleu(const std::vector<TokenSeq>& predictions, const std::vector<TokenSeq>& references, bool smoothing = false);

/// Word-overlap approximation of table-grounded evaluation.
///
/// Precision of one prediction is the geometric mean, over orders n = 1..4 that have at
/// least one predicted n-gram, of the fraction of predicted n-grams that occur in the
/// reference or consist only of table value tokens.
///
/// Recall combines reference recall and table recall as R_ref^(1 - lambda) R_tab^lambda.
/// R_ref is the geometric mean over orders of the fraction of table-entailed reference
/// n-grams present in the prediction; R_tab is the fraction of distinct table value tokens
/// present in the prediction. A part with nothing to recall is left out; with neither
/// part defined recall is 1.
///
/// Corpus precision and recall are per-example means; F1 is their harmonic mean.
struct PrfScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    /// Empty predictions, scored with precision 0.
    std::size_t empty_predictions = 0;
};

inline constexpr double kTableRecallWeight = 0.5;

struct ExamplePrf {
    double precision = 0.0;
    double recall = 0.0;
    bool empty = false;
};

ExamplePrf table_grounded_example(const TokenSeq& prediction, const TokenSeq& reference, const SourceTable& table);

PrfScore table_grounded_prf(const std::vector<TokenSeq>& predictions, const std::vector<TokenSeq>& references,
                            const std::vector<SourceTable>& tables);

double harmonic_mean(double a, double b);

/// One reference token scored by a teacher-forced pass.
struct ScoredToken {
    double confidence = 0.0;
    double score = 0.0;   // A~ (or A)
    SupportLabel label = SupportLabel::Template;
};

struct ConfidenceDiagnostics {
    std::size_t supported = 0, unsupported = 0, templatic = 0;
    std::optional<double> mean_c_supported, mean_c_unsupported, mean_c_template;
    std::optional<double> mean_score_supported, mean_score_template;
    /// Probability that an unsupported token gets a lower confidence than any other token (ties 1/2).
    std::optional<double> auc;
    /// Same, against supported tokens only.
    std::optional<double> auc_vs_supported;
};

ConfidenceDiagnostics confidence_diagnostics(const std::vector<ScoredToken>& tokens);

/// Rank-statistic AUC of `negatives` scoring higher than `positives`; absent when a side is empty.
std::optional<double> rank_auc(const std::vector<double>& positives, const std::vector<double>& negatives);

struct MetricsReport {
    std::size_t examples = 0;
    double bleu = 0.0;
    double table_precision = 0.0;
    double table_recall = 0.0;
    double table_f1 = 0.0;
    double avg_len = 0.0;
    std::size_t empty_predictions = 0;
    std::optional<ConfidenceDiagnostics> confidence;

    [[nodiscard]] std::string to_json() const;
    [[nodiscard]] std::string to_text() const;
};

MetricsReport evaluate_predictions(const std::vector<TokenSeq>& predictions, const Dataset& data);

}  // namespace confdec
