#pragma once

// Seeded synthetic tasks whose answers sit in an earlier segment than the
// query, so a segment-local backbone cannot answer them without memory.
//
// Token alphabet (ids):
//   0 PAD, 1 QUERY, 2 SEP, 3 ANS, 4 MARK,
//   [5, 5+R)            relations
//   [5+R, V−E)          filler tokens
//   [V−E, V)            entities
//
// Dataset lines look like
//   segments=40 5 51 2;51 6 33 ... 2;... answer_pos=5 answer=33 meta=task:bridge,hops:2,...

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gmem/backbone.hpp"
#include "gmem/util.hpp"

namespace gmem {

namespace tok {
inline constexpr TokenId pad = 0;
inline constexpr TokenId query = 1;
inline constexpr TokenId sep = 2;
inline constexpr TokenId ans = 3;
inline constexpr TokenId mark = 4;
inline constexpr TokenId first_relation = 5;
}  // namespace tok

enum class TaskKind { bridge, relation, copy };

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::bridge: return "bridge";
        case TaskKind::relation: return "relation";
        case TaskKind::copy: return "copy";
    }
    return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
    if (s == "bridge") return TaskKind::bridge;
    if (s == "relation") return TaskKind::relation;
    if (s == "copy") return TaskKind::copy;
    throw ConfigError("unknown task '" + std::string(s) + "' (expected bridge|relation|copy)");
}

struct TaskConfig {
    TaskKind kind = TaskKind::bridge;
    std::size_t vocab_size = 64;
    std::size_t max_segment_len = 16;
    std::size_t entities = 32;
    std::size_t relations = 8;
    std::size_t hops = 2;
    std::size_t distractors = 4;       // extra facts per distracted fact segment
    std::size_t filler_segments = 0;   // segments of filler between the facts and the query
    std::size_t filler_len = 12;       // tokens per filler segment
    std::size_t train_examples = 2000;
    std::size_t test_examples = 500;
    std::uint64_t seed = 7;            // data seed
    std::uint64_t split_seed = 11;     // held-out pair partition (relation task)
    double heldout_fraction = 0.2;

    TokenId entity_begin() const { return static_cast<TokenId>(vocab_size - entities); }
    TokenId filler_begin() const { return static_cast<TokenId>(tok::first_relation + relations); }
    std::size_t filler_count() const { return vocab_size - entities - (tok::first_relation + relations); }
    TokenId entity(std::size_t i) const { return entity_begin() + static_cast<TokenId>(i); }
    TokenId relation(std::size_t i) const { return tok::first_relation + static_cast<TokenId>(i); }
    bool is_entity(TokenId t) const { return t >= entity_begin() && t < static_cast<TokenId>(vocab_size); }

    /// Segments between the first fact and the query segment.
    std::size_t horizon() const {
        switch (kind) {
            case TaskKind::bridge: return hops + filler_segments;
            case TaskKind::relation: return 1 + filler_segments;
            case TaskKind::copy: return filler_segments;
        }
        return 0;
    }

    void validate() const {
        if (vocab_size < static_cast<std::size_t>(tok::first_relation) + relations + entities + 1) {
            throw ConfigError("vocab_size too small for " + std::to_string(relations) + " relations, " +
                              std::to_string(entities) + " entities and at least one filler token");
        }
        if (relations < 1) throw ConfigError("need at least one relation");
        if (train_examples + test_examples == 0) throw ConfigError("examples count must be positive");
        switch (kind) {
            case TaskKind::bridge: {
                if (hops < 1 || hops > 3) throw ConfigError("hops must be in 1..3");
                if (relations < hops) throw ConfigError("need at least one relation per hop");
                const std::size_t facts = distractors + 1;
                if (3 * facts + 1 > max_segment_len) throw ConfigError("too many distractors for one segment");
                if (entities < hops + 1 + 2 * distractors * std::max<std::size_t>(1, hops - 1) || entities < 2 * hops) {
                    throw ConfigError("entity vocabulary too small for the requested hops and distractors");
                }
                if (hops + 4 > max_segment_len) throw ConfigError("query does not fit in a segment");
                break;
            }
            case TaskKind::relation: {
                if (3 * (distractors + 1) > max_segment_len) throw ConfigError("too many distractors for one segment");
                if (entities < 2 * (distractors + 1)) throw ConfigError("entity vocabulary too small for distractors");
                break;
            }
            case TaskKind::copy: {
                if (filler_len < 1) throw ConfigError("copy task needs filler_len >= 1");
                const std::size_t first = filler_len + 2 + (filler_segments == 0 ? 3 : 0);
                if (first > max_segment_len) throw ConfigError("copy segment does not fit in max_segment_len");
                if (entities < 2) throw ConfigError("copy task needs at least two entities");
                break;
            }
        }
        if (filler_segments > 0 && filler_len > max_segment_len) throw ConfigError("filler_len exceeds max_segment_len");
    }
};

struct SyntheticExample {
    std::vector<Segment> segments;
    std::vector<std::size_t> answer_positions;  // indices into the final segment
    std::vector<TokenId> answer_tokens;
    std::map<std::string, std::string> meta;     // hops, bridge, distractors, seed, task

    std::size_t hops() const {
        auto it = meta.find("hops");
        return it == meta.end() ? 1 : std::stoul(it->second);
    }

    friend bool operator==(const SyntheticExample&, const SyntheticExample&) = default;
};

using Dataset = std::vector<SyntheticExample>;

struct DatasetSplits {
    Dataset train;
    Dataset test;
};

namespace detail {

struct Fact {
    TokenId subject, relation, object;
};

inline void append_fact(Segment& seg, const Fact& f) {
    seg.push_back(f.subject);
    seg.push_back(f.relation);
    seg.push_back(f.object);
}

inline Segment filler_segment(const TaskConfig& cfg, Rng& rng, std::size_t len) {
    std::uniform_int_distribution<std::size_t> pick(0, cfg.filler_count() - 1);
    Segment s(len);
    for (auto& t : s) t = cfg.filler_begin() + static_cast<TokenId>(pick(rng));
    return s;
}

// Draw `n` distinct entities not already in `used`; appends them to `used`.
inline std::vector<TokenId> draw_entities(const TaskConfig& cfg, Rng& rng, std::size_t n, std::set<TokenId>& used) {
    std::vector<TokenId> out;
    std::uniform_int_distribution<std::size_t> pick(0, cfg.entities - 1);
    while (out.size() < n) {
        TokenId e = cfg.entity(pick(rng));
        if (used.insert(e).second) out.push_back(e);
    }
    return out;
}

inline std::string join_ids(const std::vector<TokenId>& ids, char sep) {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) s += sep;
        s += std::to_string(ids[i]);
    }
    return s;
}

inline SyntheticExample finish(std::vector<Segment> segments, Segment query, std::size_t answer_index,
                               std::map<std::string, std::string> meta) {
    SyntheticExample ex;
    ex.answer_positions = {answer_index};
    ex.answer_tokens = {query[answer_index]};
    segments.push_back(std::move(query));
    ex.segments = std::move(segments);
    ex.meta = std::move(meta);
    return ex;
}

inline SyntheticExample bridge_example(const TaskConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    std::set<TokenId> used;
    const std::vector<TokenId> chain = draw_entities(cfg, rng, cfg.hops + 1, used);
    std::vector<std::size_t> rel_ids(cfg.relations);
    std::iota(rel_ids.begin(), rel_ids.end(), 0);
    std::shuffle(rel_ids.begin(), rel_ids.end(), rng);
    std::vector<TokenId> rels;
    for (std::size_t h = 0; h < cfg.hops; ++h) rels.push_back(cfg.relation(rel_ids[h]));

    std::uniform_int_distribution<std::size_t> any_rel(0, cfg.relations - 1);
    std::vector<Segment> segments;
    for (std::size_t h = 0; h < cfg.hops; ++h) {
        std::vector<Fact> facts{{chain[h], rels[h], chain[h + 1]}};
        const bool distracted = cfg.hops == 1 || h > 0;
        if (distracted) {
            // Fresh distractor entities: no distractor subject continues the chain.
            for (std::size_t d = 0; d < cfg.distractors; ++d) {
                auto pair = draw_entities(cfg, rng, 2, used);
                facts.push_back({pair[0], cfg.relation(any_rel(rng)), pair[1]});
            }
        }
        std::shuffle(facts.begin(), facts.end(), rng);
        Segment seg;
        for (const Fact& f : facts) append_fact(seg, f);
        seg.push_back(tok::sep);
        segments.push_back(std::move(seg));
    }
    for (std::size_t f = 0; f < cfg.filler_segments; ++f) segments.push_back(filler_segment(cfg, rng, cfg.filler_len));

    Segment query{tok::query, chain[0]};
    query.insert(query.end(), rels.begin(), rels.end());
    query.push_back(tok::ans);
    query.push_back(chain.back());
    const std::vector<TokenId> bridges(chain.begin() + 1, chain.end() - 1);
    const std::size_t idx = query.size() - 1;
    return finish(std::move(segments), std::move(query), idx,
                  {{"task", "bridge"},
                   {"hops", std::to_string(cfg.hops)},
                   {"bridge", bridges.empty() ? "-" : join_ids(bridges, '|')},
                   {"distractors", std::to_string(cfg.distractors)},
                   {"seed", std::to_string(seed)}});
}

inline std::vector<std::pair<std::size_t, std::size_t>> heldout_pairs(const TaskConfig& cfg, bool test) {
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t e = 0; e < cfg.entities; ++e)
        for (std::size_t r = 0; r < cfg.relations; ++r) all.emplace_back(e, r);
    Rng rng(cfg.split_seed);
    std::shuffle(all.begin(), all.end(), rng);
    const auto n_test = static_cast<std::size_t>(cfg.heldout_fraction * static_cast<double>(all.size()));
    if (n_test == 0 || n_test >= all.size()) throw ConfigError("heldout_fraction leaves an empty split");
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (test) {
        out.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_test));
    } else {
        out.assign(all.begin() + static_cast<std::ptrdiff_t>(n_test), all.end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline SyntheticExample relation_example(const TaskConfig& cfg, std::uint64_t seed,
                                         const std::vector<std::pair<std::size_t, std::size_t>>& query_pairs,
                                         const std::vector<std::pair<std::size_t, std::size_t>>& fact_pairs) {
    Rng rng(seed);
    std::set<TokenId> used;
    std::uniform_int_distribution<std::size_t> qpick(0, query_pairs.size() - 1);
    const auto [qs, qr] = query_pairs[qpick(rng)];
    const TokenId subject = cfg.entity(qs), relation = cfg.relation(qr);
    used.insert(subject);
    const TokenId object = draw_entities(cfg, rng, 1, used)[0];
    std::vector<Fact> facts{{subject, relation, object}};
    std::uniform_int_distribution<std::size_t> fpick(0, fact_pairs.size() - 1);
    while (facts.size() < cfg.distractors + 1) {
        const auto [ds, dr] = fact_pairs[fpick(rng)];
        const TokenId s = cfg.entity(ds);
        if (used.count(s)) continue;
        used.insert(s);
        const TokenId o = draw_entities(cfg, rng, 1, used)[0];
        facts.push_back({s, cfg.relation(dr), o});
    }
    std::shuffle(facts.begin(), facts.end(), rng);
    Segment seg;
    for (const Fact& f : facts) append_fact(seg, f);
    std::vector<Segment> segments{std::move(seg)};
    for (std::size_t f = 0; f < cfg.filler_segments; ++f) segments.push_back(filler_segment(cfg, rng, cfg.filler_len));
    Segment query{tok::query, subject, relation, tok::ans, object};
    return finish(std::move(segments), std::move(query), 4,
                  {{"task", "relation"},
                   {"hops", "1"},
                   {"bridge", "-"},
                   {"distractors", std::to_string(cfg.distractors)},
                   {"seed", std::to_string(seed)}});
}

inline SyntheticExample copy_example(const TaskConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> epick(0, cfg.entities - 1);
    const TokenId marked = cfg.entity(epick(rng));
    Segment first = filler_segment(cfg, rng, cfg.filler_len);
    std::uniform_int_distribution<std::size_t> where(0, first.size());
    const auto at = static_cast<std::ptrdiff_t>(where(rng));
    first.insert(first.begin() + at, {tok::mark, marked});
    std::vector<Segment> segments;
    Segment query;
    if (cfg.filler_segments == 0) {
        query = std::move(first);
    } else {
        segments.push_back(std::move(first));
        for (std::size_t f = 0; f < cfg.filler_segments; ++f) segments.push_back(filler_segment(cfg, rng, cfg.filler_len));
    }
    query.insert(query.end(), {tok::query, tok::ans, marked});
    const std::size_t idx = query.size() - 1;
    return finish(std::move(segments), std::move(query), idx,
                  {{"task", "copy"},
                   {"hops", "1"},
                   {"bridge", "-"},
                   {"distractors", "0"},
                   {"horizon", std::to_string(cfg.filler_segments)},
                   {"seed", std::to_string(seed)}});
}

// Stream ids keep train and test examples on disjoint seed sequences.
inline constexpr std::uint64_t kTrainStream = 0x7472;
inline constexpr std::uint64_t kTestStream = 0x7465;

inline Dataset generate(const TaskConfig& cfg, std::size_t count, std::uint64_t stream, bool test_split) {
    cfg.validate();
    Dataset out;
    out.reserve(count);
    const std::uint64_t base = derive_seed(cfg.seed, stream);
    std::vector<std::pair<std::size_t, std::size_t>> qpairs, fpairs;
    if (cfg.kind == TaskKind::relation) {
        qpairs = heldout_pairs(cfg, test_split);
        fpairs = qpairs;
        if (test_split) {
            // Test distractors may use any pair; training never shows a test pair.
            fpairs = heldout_pairs(cfg, false);
            fpairs.insert(fpairs.end(), qpairs.begin(), qpairs.end());
        }
    }
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t seed = derive_seed(base, i);
        switch (cfg.kind) {
            case TaskKind::bridge: out.push_back(bridge_example(cfg, seed)); break;
            case TaskKind::relation: out.push_back(relation_example(cfg, seed, qpairs, fpairs)); break;
            case TaskKind::copy: out.push_back(copy_example(cfg, seed)); break;
        }
    }
    return out;
}

}  // namespace detail

/// Two-hop (or 1–3 hop) bridge recall: fact k sits in segment k, distractors
/// share its segment, and the query asks for the end of the chain.
inline DatasetSplits gen_bridge_recall(TaskConfig cfg) {
    cfg.kind = TaskKind::bridge;
    return {detail::generate(cfg, cfg.train_examples, detail::kTrainStream, false),
            detail::generate(cfg, cfg.test_examples, detail::kTestStream, true)};
}

/// Single relation lookup; test queries use (subject, relation) pairs that
/// never occur anywhere in the training split.
inline DatasetSplits gen_relation_recall(TaskConfig cfg) {
    cfg.kind = TaskKind::relation;
    return {detail::generate(cfg, cfg.train_examples, detail::kTrainStream, false),
            detail::generate(cfg, cfg.test_examples, detail::kTestStream, true)};
}

/// Reproduce a marked entity after `filler_segments` segments of filler.
inline DatasetSplits gen_long_copy(TaskConfig cfg) {
    cfg.kind = TaskKind::copy;
    return {detail::generate(cfg, cfg.train_examples, detail::kTrainStream, false),
            detail::generate(cfg, cfg.test_examples, detail::kTestStream, true)};
}

inline DatasetSplits generate_task(const TaskConfig& cfg) {
    switch (cfg.kind) {
        case TaskKind::bridge: return gen_bridge_recall(cfg);
        case TaskKind::relation: return gen_relation_recall(cfg);
        case TaskKind::copy: return gen_long_copy(cfg);
    }
    throw ConfigError("unknown task kind");
}

// ---------------------------------------------------------------------------
// Text format

inline std::string format_example(const SyntheticExample& ex) {
    std::string s = "segments=";
    for (std::size_t k = 0; k < ex.segments.size(); ++k) {
        if (k) s += ';';
        s += detail::join_ids(ex.segments[k], ' ');
    }
    s += " answer_pos=";
    for (std::size_t i = 0; i < ex.answer_positions.size(); ++i) {
        if (i) s += ' ';
        s += std::to_string(ex.answer_positions[i]);
    }
    s += " answer=" + detail::join_ids(ex.answer_tokens, ' ');
    s += " meta=";
    bool first = true;
    for (const auto& [k, v] : ex.meta) {
        if (!first) s += ',';
        first = false;
        s += k + ':' + v;
    }
    return s;
}

namespace detail {

template <class T>
std::vector<T> parse_ints(std::string_view s, std::size_t line) {
    std::vector<T> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && s[i] == ' ') ++i;
        if (i >= s.size()) break;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ') ++j;
        T v{};
        auto [p, ec] = std::from_chars(s.data() + i, s.data() + j, v);
        if (ec != std::errc{} || p != s.data() + j) {
            throw InputError("dataset line " + std::to_string(line) + ": bad integer '" + std::string(s.substr(i, j - i)) + "'");
        }
        out.push_back(v);
        i = j;
    }
    return out;
}

}  // namespace detail

inline SyntheticExample parse_example(std::string_view line, std::size_t line_no = 0) {
    auto field = [&](std::string_view key, std::string_view next) -> std::string_view {
        const auto b = line.find(key);
        if (b == std::string_view::npos) throw InputError("dataset line " + std::to_string(line_no) + ": missing " + std::string(key));
        const auto start = b + key.size();
        const auto e = next.empty() ? line.size() : line.find(next, start);
        if (e == std::string_view::npos) throw InputError("dataset line " + std::to_string(line_no) + ": missing " + std::string(next));
        return line.substr(start, e - start);
    };
    if (!line.starts_with("segments=")) throw InputError("dataset line " + std::to_string(line_no) + ": must start with segments=");
    SyntheticExample ex;
    std::string_view segs = field("segments=", " answer_pos=");
    std::size_t b = 0;
    while (true) {
        const auto e = segs.find(';', b);
        ex.segments.push_back(detail::parse_ints<TokenId>(segs.substr(b, e == std::string_view::npos ? segs.npos : e - b), line_no));
        if (ex.segments.back().empty()) throw InputError("dataset line " + std::to_string(line_no) + ": empty segment");
        if (e == std::string_view::npos) break;
        b = e + 1;
    }
    ex.answer_positions = detail::parse_ints<std::size_t>(field(" answer_pos=", " answer="), line_no);
    ex.answer_tokens = detail::parse_ints<TokenId>(field(" answer=", " meta="), line_no);
    std::string_view meta = field(" meta=", "");
    while (!meta.empty()) {
        const auto comma = meta.find(',');
        std::string_view kv = meta.substr(0, comma);
        const auto colon = kv.find(':');
        if (colon == std::string_view::npos) throw InputError("dataset line " + std::to_string(line_no) + ": bad meta entry");
        ex.meta.emplace(std::string(kv.substr(0, colon)), std::string(kv.substr(colon + 1)));
        if (comma == std::string_view::npos) break;
        meta.remove_prefix(comma + 1);
    }
    if (ex.answer_positions.size() != ex.answer_tokens.size() || ex.answer_positions.empty()) {
        throw InputError("dataset line " + std::to_string(line_no) + ": answer_pos and answer differ in length");
    }
    const Segment& last = ex.segments.back();
    for (std::size_t i = 0; i < ex.answer_positions.size(); ++i) {
        const std::size_t p = ex.answer_positions[i];
        if (p == 0 || p >= last.size() || last[p] != ex.answer_tokens[i]) {
            throw InputError("dataset line " + std::to_string(line_no) + ": answer position does not hold the answer");
        }
    }
    return ex;
}

inline void write_dataset(const Dataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (const auto& ex : data) out << format_example(ex) << '\n';
    if (!out) throw IoError("failed writing '" + path + "'");
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    Dataset data;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        data.push_back(parse_example(line, n));
    }
    return data;
}

/// True when no answer token occurs in the query segment before its position.
inline bool answer_unleaked(const SyntheticExample& ex) {
    const Segment& q = ex.segments.back();
    for (std::size_t i = 0; i < ex.answer_positions.size(); ++i) {
        const auto end = static_cast<std::ptrdiff_t>(ex.answer_positions[i]);
        if (std::find(q.begin(), q.begin() + end, ex.answer_tokens[i]) != q.begin() + end) return false;
    }
    return true;
}

}  // namespace gmem
