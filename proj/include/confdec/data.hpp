#pragma once

#include "confdec/model.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace confdec {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Field {
    std::vector<std::string> key;
    std::vector<std::string> value;
    bool operator==(const Field&) const = default;
};

/// Ordered key/value records. Duplicate keys are allowed and keep their order.
struct SourceTable {
    std::vector<Field> fields;
    bool operator==(const SourceTable&) const = default;
};

enum class TokenRole : std::uint8_t { KeyMarker, Key, ValueMarker, Value, FieldSeparator };

struct Provenance {
    int field = -1;
    TokenRole role = TokenRole::Key;
    bool operator==(const Provenance&) const = default;
};

struct LinearizedSource {
    std::vector<int> ids;
    std::vector<Provenance> provenance;
};

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kNull = 4;
    static constexpr int kKey = 5;
    static constexpr int kVal = 6;
    static constexpr int kFieldSep = 7;
    static constexpr int kReservedCount = 8;
    static const std::array<std::string, kReservedCount>& reserved();

    Vocabulary();

    /// Id of a token, or kUnk when absent.
    [[nodiscard]] int id(std::string_view token) const;
    [[nodiscard]] std::optional<int> find(std::string_view token) const;
    [[nodiscard]] const std::string& token(int id) const;
    [[nodiscard]] std::size_t size() const { return tokens_.size(); }
    [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }
    [[nodiscard]] SpecialTokens special() const { return {kBos, kEos, kNull}; }
    [[nodiscard]] static bool is_reserved(std::string_view token);

    int add(const std::string& token);

    std::vector<int> encode(const std::vector<std::string>& tokens) const;
    std::vector<std::string> decode(std::span<const int> ids) const;

    /// One token per line, reserved block first.
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

std::vector<std::string> tokenize(std::string_view text);
std::string join_tokens(const std::vector<std::string>& tokens);

/// `<key> k... <val> v... <fsep>` per field, in table order.
LinearizedSource linearize(const SourceTable& table, const Vocabulary& vocab);
/// Inverse of linearize using the provenance markers.
SourceTable delinearize(const LinearizedSource& source, const Vocabulary& vocab);

enum class SupportLabel : std::uint8_t { Template, Supported, Unsupported };
const char* to_string(SupportLabel l);
SupportLabel parse_support_label(std::string_view s);

struct Example {
    std::string id;
    SourceTable table;
    std::vector<std::string> reference;
    /// Per reference token; empty when the corpus carries no gold labels.
    std::vector<SupportLabel> support;
};

using Dataset = std::vector<Example>;

/// Throws DataError naming the line number for malformed input.
Example parse_example(std::string_view line, std::size_t line_number = 0);
std::string format_example(const Example& ex);
Dataset load_dataset(const std::string& path);
void save_dataset(const std::string& path, const Dataset& data);

/// Frequency-ordered vocabulary over table keys, values and references. `max_size`
/// counts the reserved block; 0 means unlimited. Ties break lexicographically.
Vocabulary build_vocab(const Dataset& corpus, std::size_t max_size = 0);

/// Model-ready ids: linearized table and reference followed by EOS.
struct EncodedExample {
    std::vector<int> source;
    std::vector<int> target;
};
EncodedExample encode_example(const Example& ex, const Vocabulary& vocab);

// ---- synthetic corpus -------------------------------------------------------

struct FieldSchema {
    std::string key;
    /// One value pool per value token; a value draws one token from each pool.
    std::vector<std::vector<std::string>> slots;
    /// Realization patterns; "{}" is replaced by the value tokens.
    std::vector<std::string> phrases;
    /// Always present in the table and always realized first.
    bool required = false;
    /// Relative chance of being the unsupported extra field of a divergent reference.
    /// Only single-token fields with positive weight are eligible.
    double divergence_weight = 0.0;
};

struct SynthConfig {
    std::size_t num_train = 2000;
    std::size_t num_valid = 200;
    std::size_t num_test = 200;
    /// Fraction of references carrying exactly one unsupported value token. Such a
    /// reference mentions one extra single-token field whose value the table lacks.
    double divergence_rate = 0.3;
    std::size_t min_fields = 3;
    std::size_t max_fields = 6;
    /// Probability that a present optional field is mentioned in the reference.
    double realize_prob = 0.85;
    std::vector<FieldSchema> schema;
    std::uint64_t seed = 7;

    static std::vector<FieldSchema> default_schema();
};

struct SyntheticCorpus {
    Dataset train, valid, test;
};

/// Throws std::invalid_argument for infeasible configurations.
SyntheticCorpus generate_synthetic(SynthConfig cfg);

}  // namespace confdec
