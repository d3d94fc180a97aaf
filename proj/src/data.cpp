#include "confdec/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace confdec {

using nlohmann::json;

// ---- vocabulary ---------------------------------------------------------

const std::array<std::string, Vocabulary::kReservedCount>& Vocabulary::reserved() {
    static const std::array<std::string, kReservedCount> tokens{"<pad>", "<s>",   "</s>", "<unk>",
                                                                "<null>", "<key>", "<val>", "<fsep>"};
    return tokens;
}

Vocabulary::Vocabulary() {
    for (const auto& t : reserved()) add(t);
}

bool Vocabulary::is_reserved(std::string_view token) {
    const auto& r = reserved();
    return std::find(r.begin(), r.end(), token) != r.end();
}

int Vocabulary::add(const std::string& token) {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
}

std::optional<int> Vocabulary::find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

int Vocabulary::id(std::string_view token) const { return find(token).value_or(kUnk); }

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw std::out_of_range("Vocabulary: id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write vocabulary '" + path + "'");
    for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read vocabulary '" + path + "'");
    Vocabulary v;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line_no <= static_cast<std::size_t>(kReservedCount)) {
            if (line != reserved()[line_no - 1])
                throw DataError(path + ":" + std::to_string(line_no) + ": expected reserved token '" +
                                reserved()[line_no - 1] + "'");
            continue;
        }
        if (line.empty() || v.find(line)) throw DataError(path + ":" + std::to_string(line_no) + ": bad token");
        v.add(line);
    }
    if (line_no < static_cast<std::size_t>(kReservedCount)) throw DataError(path + ": missing reserved block");
    return v;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::istringstream in{std::string(text)};
    for (std::string t; in >> t;) out.push_back(std::move(t));
    return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

// ---- linearization ----------------------------------------------------------

LinearizedSource linearize(const SourceTable& table, const Vocabulary& vocab) {
    LinearizedSource out;
    auto emit = [&](int id, int field, TokenRole role) {
        out.ids.push_back(id);
        out.provenance.push_back({field, role});
    };
    for (std::size_t f = 0; f < table.fields.size(); ++f) {
        const Field& field = table.fields[f];
        const int fi = static_cast<int>(f);
        if (field.key.empty()) throw DataError("linearize: field " + std::to_string(f) + " has an empty key");
        emit(Vocabulary::kKey, fi, TokenRole::KeyMarker);
        for (const auto& t : field.key) {
            if (Vocabulary::is_reserved(t)) throw DataError("linearize: reserved token '" + t + "' in table key");
            emit(vocab.id(t), fi, TokenRole::Key);
        }
        emit(Vocabulary::kVal, fi, TokenRole::ValueMarker);
        for (const auto& t : field.value) {
            if (Vocabulary::is_reserved(t)) throw DataError("linearize: reserved token '" + t + "' in table value");
            emit(vocab.id(t), fi, TokenRole::Value);
        }
        emit(Vocabulary::kFieldSep, fi, TokenRole::FieldSeparator);
    }
    return out;
}

SourceTable delinearize(const LinearizedSource& source, const Vocabulary& vocab) {
    if (source.ids.size() != source.provenance.size())
        throw DataError("delinearize: ids and provenance differ in length");
    SourceTable table;
    for (std::size_t i = 0; i < source.ids.size(); ++i) {
        const Provenance& p = source.provenance[i];
        if (p.field < 0) throw DataError("delinearize: token without field provenance");
        while (table.fields.size() <= static_cast<std::size_t>(p.field)) table.fields.emplace_back();
        Field& f = table.fields[static_cast<std::size_t>(p.field)];
        if (p.role == TokenRole::Key) f.key.push_back(vocab.token(source.ids[i]));
        else if (p.role == TokenRole::Value) f.value.push_back(vocab.token(source.ids[i]));
    }
    return table;
}

// ---- JSONL ------------------------------------------------------------------

const char* to_string(SupportLabel l) {
    switch (l) {
        case SupportLabel::Template: return "template";
        case SupportLabel::Supported: return "supported";
        case SupportLabel::Unsupported: return "unsupported";
    }
    return "?";
}

SupportLabel parse_support_label(std::string_view s) {
    if (s == "template") return SupportLabel::Template;
    if (s == "supported") return SupportLabel::Supported;
    if (s == "unsupported") return SupportLabel::Unsupported;
    throw DataError("unknown support label '" + std::string(s) + "'");
}

Example parse_example(std::string_view line, std::size_t line_number) {
    const std::string where = "line " + std::to_string(line_number) + ": ";
    try {
        const json j = json::parse(line);
        if (!j.is_object()) throw DataError(where + "expected a JSON object");
        Example ex;
        if (j.contains("id")) ex.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
        for (const auto& pair : j.at("table")) {
            if (!pair.is_array() || pair.size() != 2) throw DataError(where + "table entries must be [key, value]");
            Field f{tokenize(pair.at(0).get<std::string>()), tokenize(pair.at(1).get<std::string>())};
            if (f.key.empty()) throw DataError(where + "empty table key");
            ex.table.fields.push_back(std::move(f));
        }
        ex.reference = tokenize(j.at("reference").get<std::string>());
        if (j.contains("support_labels")) {
            for (const auto& l : j.at("support_labels")) ex.support.push_back(parse_support_label(l.get<std::string>()));
            if (ex.support.size() != ex.reference.size())
                throw DataError(where + "support_labels length differs from reference length");
        }
        return ex;
    } catch (const DataError&) {
        throw;
    } catch (const std::exception& e) {
        throw DataError(where + e.what());
    }
}

std::string format_example(const Example& ex) {
    json j;
    j["id"] = ex.id;
    json table = json::array();
    for (const auto& f : ex.table.fields) table.push_back({join_tokens(f.key), join_tokens(f.value)});
    j["table"] = std::move(table);
    j["reference"] = join_tokens(ex.reference);
    if (!ex.support.empty()) {
        json labels = json::array();
        for (auto l : ex.support) labels.push_back(to_string(l));
        j["support_labels"] = std::move(labels);
    }
    return j.dump();
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read dataset '" + path + "'");
    Dataset out;
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(parse_example(line, n));
        } catch (const DataError& e) {
            throw DataError(path + ": " + e.what());
        }
    }
    return out;
}

void save_dataset(const std::string& path, const Dataset& data) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write dataset '" + path + "'");
    for (const auto& ex : data) out << format_example(ex) << '\n';
}

Vocabulary build_vocab(const Dataset& corpus, std::size_t max_size) {
    std::map<std::string, std::size_t> counts;
    auto count = [&](const std::vector<std::string>& toks) {
        for (const auto& t : toks)
            if (!Vocabulary::is_reserved(t)) ++counts[t];
    };
    for (const auto& ex : corpus) {
        for (const auto& f : ex.table.fields) {
            count(f.key);
            count(f.value);
        }
        count(ex.reference);
    }
    std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [tok, c] : ordered) {
        if (max_size != 0 && v.size() >= max_size) break;
        v.add(tok);
    }
    return v;
}

EncodedExample encode_example(const Example& ex, const Vocabulary& vocab) {
    EncodedExample e;
    e.source = linearize(ex.table, vocab).ids;
    e.target = vocab.encode(ex.reference);
    e.target.push_back(Vocabulary::kEos);
    return e;
}

// ---- synthetic corpus -------------------------------------------------------

std::vector<FieldSchema> SynthConfig::default_schema() {
    auto numbers = [](int lo, int hi) {
        std::vector<std::string> v;
        for (int i = lo; i <= hi; ++i) v.push_back(std::to_string(i));
        return v;
    };
    std::vector<FieldSchema> s;
    s.push_back({"name",
                 {{"walter", "frank", "alice", "maria", "john", "peter", "anna", "lucas", "sofia", "david",
                   "elena", "marco", "laura", "oscar", "nina", "hugo", "clara", "ivan", "rosa", "tomas"},
                  {"smallwood", "lino", "edwards", "molnar", "stock", "lloyd", "garcia", "novak", "berg",
                   "costa", "fischer", "moreau", "rossi", "silva", "jensen", "kowalski", "dubois", "weber",
                   "ortiz", "larsen"}},
                 {"{}"},
                 true});
    s.push_back({"birth date",
                 {{"january", "february", "march", "april", "may", "june", "july", "august", "september",
                   "october", "november", "december"},
                  numbers(1, 28),
                  numbers(1930, 1969)},
                 {"( born {} )", "( born on {} )"}});
    s.push_back({"birth place",
                 {{"brooklyn", "gravesend", "lisbon", "vienna", "madrid", "oslo", "prague", "dublin", "turin",
                   "lyon", "porto", "krakow", "bergen", "seville", "munich", "geneva"}},
                 {"from {}", "raised in {}"}});
    s.push_back({"nationality",
                 {{"american", "british", "welsh", "belgian", "italian", "spanish", "german", "french",
                   "polish", "danish", "norwegian", "irish"}},
                 {"is a {} citizen", "was a {} national"}});
    s.push_back({"occupation",
                 {{"pitcher", "author", "painter", "architect", "chemist", "lawyer", "singer", "sculptor",
                   "physician", "engineer", "poet", "journalist", "actor", "historian", "pilot", "banker"}},
                 {"who worked as a {}", "and a known {}"},
                 false,
                 1.0});
    s.push_back({"team",
                 {{"anderlecht", "ajax", "benfica", "celtic", "feyenoord", "juventus", "porto_fc", "rapid",
                   "sparta", "valencia", "brann", "lazio"}},
                 {"who played for {}", "and a member of {}"}});
    return s;
}

namespace {

struct Realized {
    std::vector<std::string> tokens;
    std::vector<SupportLabel> labels;
    // (reference position, field index, slot index) for every value token.
    std::vector<std::array<std::size_t, 3>> value_positions;
};

void realize_phrase(const std::string& pattern, const std::vector<std::string>& value, std::size_t field,
                    Realized& out) {
    for (const auto& piece : tokenize(pattern)) {
        if (piece == "{}") {
            for (std::size_t k = 0; k < value.size(); ++k) {
                out.value_positions.push_back({out.tokens.size(), field, k});
                out.tokens.push_back(value[k]);
                out.labels.push_back(SupportLabel::Supported);
            }
        } else {
            out.tokens.push_back(piece);
            out.labels.push_back(SupportLabel::Template);
        }
    }
}

Example generate_one(const SynthConfig& cfg, Rng& rng, bool diverge, const std::string& id) {
    const auto& schema = cfg.schema;
    std::vector<std::size_t> required, optional;
    for (std::size_t f = 0; f < schema.size(); ++f) (schema[f].required ? required : optional).push_back(f);

    // A divergent reference realizes one extra single-token field that the table lacks.
    std::optional<std::size_t> extra;
    if (diverge) {
        double total = 0.0;
        for (std::size_t f : optional)
            if (schema[f].slots.size() == 1 && schema[f].divergence_weight > 0.0) total += schema[f].divergence_weight;
        if (total <= 0.0) throw std::invalid_argument("generate_synthetic: no single-token field to diverge on");
        double u = rng.uniform() * total;
        for (std::size_t f : optional) {
            if (schema[f].slots.size() != 1 || schema[f].divergence_weight <= 0.0) continue;
            extra = f;
            u -= schema[f].divergence_weight;
            if (u < 0.0) break;
        }
        optional.erase(std::find(optional.begin(), optional.end(), *extra));
    }

    const std::size_t lo = std::max(cfg.min_fields, required.size());
    const std::size_t hi = std::min(cfg.max_fields, required.size() + optional.size());
    if (lo > hi) throw std::invalid_argument("generate_synthetic: field counts cannot be satisfied by the schema");
    const std::size_t n_fields = lo + static_cast<std::size_t>(rng.below(hi - lo + 1));

    // Partial Fisher-Yates over optional fields, then restore schema order.
    std::vector<std::size_t> chosen = required;
    for (std::size_t i = 0; i < optional.size() && chosen.size() < n_fields; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(optional.size() - i));
        std::swap(optional[i], optional[j]);
        chosen.push_back(optional[i]);
    }
    std::sort(chosen.begin(), chosen.end());

    Example ex;
    ex.id = id;
    std::vector<std::vector<std::string>> values(schema.size());
    std::set<std::string> table_values;
    for (std::size_t f : chosen) {
        for (const auto& pool : schema[f].slots) values[f].push_back(pool[rng.below(pool.size())]);
        ex.table.fields.push_back({tokenize(schema[f].key), values[f]});
        table_values.insert(values[f].begin(), values[f].end());
    }
    if (extra) {
        std::vector<std::string> alts;
        for (const auto& cand : schema[*extra].slots[0])
            if (!table_values.count(cand)) alts.push_back(cand);
        if (alts.empty()) throw std::invalid_argument("generate_synthetic: value pools too small to diverge");
        values[*extra] = {alts[rng.below(alts.size())]};
    }

    std::vector<std::size_t> mentioned = chosen;
    if (extra) {
        mentioned.push_back(*extra);
        std::sort(mentioned.begin(), mentioned.end());
    }
    Realized r;
    for (std::size_t f : mentioned) {
        const FieldSchema& fs = schema[f];
        const bool is_extra = extra && f == *extra;
        if (!fs.required && !is_extra && !rng.bernoulli(cfg.realize_prob)) continue;
        const std::size_t first = r.tokens.size();
        realize_phrase(fs.phrases[rng.below(fs.phrases.size())], values[f], f, r);
        if (is_extra)
            for (std::size_t pos = first; pos < r.tokens.size(); ++pos)
                if (r.labels[pos] == SupportLabel::Supported) r.labels[pos] = SupportLabel::Unsupported;
    }
    r.tokens.push_back(".");
    r.labels.push_back(SupportLabel::Template);

    ex.reference = std::move(r.tokens);
    ex.support = std::move(r.labels);
    return ex;
}

}  // namespace

SyntheticCorpus generate_synthetic(SynthConfig cfg) {
    if (cfg.schema.empty()) cfg.schema = SynthConfig::default_schema();
    if (!(cfg.divergence_rate >= 0.0 && cfg.divergence_rate <= 1.0))
        throw std::invalid_argument("generate_synthetic: divergence_rate must lie in [0, 1]");
    if (cfg.min_fields > cfg.max_fields) throw std::invalid_argument("generate_synthetic: min_fields > max_fields");
    std::size_t n_required = 0;
    for (const auto& f : cfg.schema) {
        if (f.slots.empty() || f.phrases.empty())
            throw std::invalid_argument("generate_synthetic: field '" + f.key + "' needs slots and phrases");
        for (const auto& pool : f.slots)
            if (pool.empty()) throw std::invalid_argument("generate_synthetic: empty value pool in '" + f.key + "'");
        if (f.required) ++n_required;
    }
    if (n_required > cfg.max_fields || cfg.min_fields > cfg.schema.size())
        throw std::invalid_argument("generate_synthetic: field counts cannot be satisfied by the schema");

    SyntheticCorpus out;
    Rng rng(cfg.seed);
    // Exactly round(rate * n) divergent references per split, at shuffled positions.
    auto make_split = [&](std::size_t n, const std::string& prefix, Dataset& dst) {
        const auto n_div = static_cast<std::size_t>(std::llround(cfg.divergence_rate * static_cast<double>(n)));
        std::vector<bool> diverge(n, false);
        std::fill(diverge.begin(), diverge.begin() + static_cast<std::ptrdiff_t>(n_div), true);
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.below(i));
            std::swap(diverge[i - 1], diverge[j]);
        }
        dst.reserve(n);
        for (std::size_t i = 0; i < n; ++i) dst.push_back(generate_one(cfg, rng, diverge[i], prefix + std::to_string(i)));
    };
    make_split(cfg.num_train, "train-", out.train);
    make_split(cfg.num_valid, "valid-", out.valid);
    make_split(cfg.num_test, "test-", out.test);
    return out;
}

}  // namespace confdec
