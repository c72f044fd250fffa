#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "minipost/data.hpp"

using namespace minipost;

namespace {

InstructionExample sample_ex() {
    InstructionExample ex;
    ex.system = "be terse";
    ex.user = "add 2 and 3";
    ex.constraints = {"answer with digits only", "no punctuation"};
    ex.response = "5";
    ex.source_tag = "general";
    return ex;
}

}  // namespace

TEST_CASE("augment_placement leaves empty-constraint examples unchanged") {
    InstructionExample ex = sample_ex();
    ex.constraints.clear();
    auto out = augment_placement(ex, std::uint64_t{1});
    CHECK(out.system == ex.system);
    CHECK(out.user == ex.user);
    CHECK(out.response == ex.response);
}

TEST_CASE("augment_placement is deterministic under a fixed seed") {
    auto a = augment_placement(sample_ex(), std::uint64_t{7});
    auto b = augment_placement(sample_ex(), std::uint64_t{7});
    CHECK(a.system == b.system);
    CHECK(a.user == b.user);
}

TEST_CASE("augment_placement moves constraint text verbatim to one side") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL}) {
        auto out = augment_placement(sample_ex(), seed);
        CHECK(out.constraints.empty());
        const bool in_system =
            out.system.find("answer with digits only") != std::string::npos;
        const bool in_user =
            out.user.find("answer with digits only") != std::string::npos;
        CHECK(in_system != in_user);  // exactly one placement
        if (in_system) {
            CHECK(out.system.find("no punctuation") != std::string::npos);
            CHECK(out.user == sample_ex().user);
        }
    }
}

TEST_CASE("augment_placement frequency is 0.5 within 0.02 over 10k samples") {
    Rng rng(derive_seed(2024, "placement-freq"));
    int system_side = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto out = augment_placement(sample_ex(), rng);
        if (out.system.find("digits") != std::string::npos) ++system_side;
    }
    const double freq = static_cast<double>(system_side) / n;
    CHECK(std::abs(freq - 0.5) < 0.02);
}

TEST_CASE("render mask covers exactly the response bytes plus eos") {
    auto seq = render(sample_ex());
    seq.validate();
    std::size_t ones = 0;
    for (auto m : seq.loss_mask) ones += m;
    CHECK(ones == sample_ex().response.size() + 1);

    // template structure: sys marker, system bytes, usr marker, ...
    CHECK(seq.ids.front() == tok::kSys);
    CHECK(seq.ids.back() == tok::kEos);
    CHECK(seq.loss_mask.back() == 1);
}

TEST_CASE("render is deterministic") {
    auto a = render(sample_ex());
    auto b = render(sample_ex());
    CHECK(a.ids == b.ids);
    CHECK(a.loss_mask == b.loss_mask);
}

TEST_CASE("render prompt tokens carry zero mask token by token") {
    auto seq = render(sample_ex());
    // everything before the <asst> marker (inclusive) must be mask 0
    std::size_t asst_pos = 0;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        if (seq.ids[i] == tok::kAsst) {
            asst_pos = i;
            break;
        }
    }
    REQUIRE(asst_pos > 0);
    for (std::size_t i = 0; i <= asst_pos; ++i) {
        CHECK(seq.loss_mask[i] == 0);
    }
    for (std::size_t i = asst_pos + 1; i < seq.ids.size(); ++i) {
        CHECK(seq.loss_mask[i] == 1);
    }
}

TEST_CASE("render rejects empty user or response") {
    InstructionExample ex = sample_ex();
    ex.user.clear();
    CHECK_THROWS_AS(render(ex), std::invalid_argument);
    ex = sample_ex();
    ex.response.clear();
    CHECK_THROWS_AS(render(ex), std::invalid_argument);
}

TEST_CASE("pack: exact fit gives one segment and no padding") {
    TokenSequence ex;
    for (int i = 0; i < 10; ++i) ex.push_back(tok::kByteOffset + i, 1);
    auto bins = pack({ex}, 10);
    REQUIRE(bins.size() == 1);
    CHECK(bins[0].segments.size() == 1);
    CHECK(bins[0].segments[0] == std::pair<int, int>{0, 10});
    CHECK(bins[0].tokens == ex.ids);
}

TEST_CASE("pack: three length-3 examples into pack_len 10 leave one pad token") {
    std::vector<TokenSequence> exs;
    for (int e = 0; e < 3; ++e) {
        TokenSequence s;
        for (int i = 0; i < 3; ++i) s.push_back(tok::kByteOffset + e, 1);
        exs.push_back(s);
    }
    auto bins = pack(exs, 10);
    REQUIRE(bins.size() == 1);
    CHECK(bins[0].segments.size() == 3);
    CHECK(bins[0].tokens.size() == 10);
    CHECK(bins[0].tokens.back() == tok::kPad);
    CHECK(bins[0].loss_mask.back() == 0);
    int pad_count = 0;
    for (int id : bins[0].tokens) pad_count += (id == tok::kPad);
    CHECK(pad_count == 1);
}

TEST_CASE("pack conservation: mask ones survive packing exactly") {
    Rng rng(5);
    std::vector<TokenSequence> exs;
    std::size_t expected_ones = 0;
    for (int e = 0; e < 50; ++e) {
        InstructionExample ex;
        ex.user = std::string(1 + rng.below(12), 'u');
        ex.response = std::string(1 + rng.below(20), 'r');
        exs.push_back(render(ex));
        expected_ones += ex.response.size() + 1;
    }
    PackStats stats;
    auto bins = pack(exs, 64, &stats);
    CHECK(stats.packed == 50);
    CHECK(stats.skipped_oversize == 0);
    std::size_t ones = 0;
    for (const auto& bin : bins) {
        for (auto m : bin.loss_mask) ones += m;
    }
    CHECK(ones == expected_ones);
}

TEST_CASE("pack: no example crosses a segment boundary") {
    Rng rng(6);
    std::vector<TokenSequence> exs;
    for (int e = 0; e < 30; ++e) {
        TokenSequence s;
        const int len = 2 + static_cast<int>(rng.below(9));
        for (int i = 0; i < len; ++i) s.push_back(tok::kByteOffset + e, 0);
        exs.push_back(s);
    }
    auto bins = pack(exs, 16);
    // segments are disjoint, ordered and within the pack; each segment's
    // tokens identify one source example (constant marker byte)
    for (const auto& bin : bins) {
        int prev_end = 0;
        for (auto [b, e] : bin.segments) {
            CHECK(b >= prev_end);
            CHECK(e <= bin.pack_len);
            CHECK(e > b);
            const int marker = bin.tokens[static_cast<std::size_t>(b)];
            for (int i = b; i < e; ++i) {
                CHECK(bin.tokens[static_cast<std::size_t>(i)] == marker);
            }
            prev_end = e;
        }
    }
}

TEST_CASE("pack skips oversize examples and counts them") {
    TokenSequence big;
    for (int i = 0; i < 20; ++i) big.push_back(tok::kByteOffset, 1);
    TokenSequence small;
    small.push_back(tok::kByteOffset, 1);
    PackStats stats;
    auto bins = pack({big, small}, 10, &stats);
    CHECK(stats.skipped_oversize == 1);
    CHECK(stats.packed == 1);
    REQUIRE(bins.size() == 1);
    CHECK(bins[0].segments.size() == 1);
}

TEST_CASE("build_mixture: full-count single source is a permutation") {
    std::map<std::string, std::vector<InstructionExample>> sources;
    for (int i = 0; i < 8; ++i) {
        InstructionExample ex;
        ex.user = "q" + std::to_string(i);
        ex.response = "a" + std::to_string(i);
        sources["only"].push_back(ex);
    }
    MixtureSpec spec;
    spec.counts = {{"only", 8}};
    spec.seed = 3;
    auto out = build_mixture(spec, sources);
    REQUIRE(out.size() == 8);
    std::set<std::string> users;
    for (const auto& ex : out) users.insert(ex.user);
    CHECK(users.size() == 8);
}

TEST_CASE("build_mixture: per-source counts match the spec exactly") {
    std::map<std::string, std::vector<InstructionExample>> sources;
    for (const auto& [tag, n] : {std::pair{std::string("a"), 20},
                                 {std::string("b"), 10},
                                 {std::string("c"), 5}}) {
        for (int i = 0; i < n; ++i) {
            InstructionExample ex;
            ex.user = "u";
            ex.response = "r";
            ex.source_tag = tag;
            sources[tag].push_back(ex);
        }
    }
    MixtureSpec spec;
    spec.counts = {{"a", 10}, {"b", 5}, {"c", 2}};
    spec.seed = 11;
    auto out = build_mixture(spec, sources);
    std::map<std::string, int> counts;
    for (const auto& ex : out) counts[ex.source_tag]++;
    CHECK(counts["a"] == 10);
    CHECK(counts["b"] == 5);
    CHECK(counts["c"] == 2);
}

TEST_CASE("build_mixture determinism and with-replacement fallback") {
    std::map<std::string, std::vector<InstructionExample>> sources;
    for (int i = 0; i < 4; ++i) {
        InstructionExample ex;
        ex.user = "u" + std::to_string(i);
        ex.response = "r";
        sources["s"].push_back(ex);
    }
    MixtureSpec spec;
    spec.counts = {{"s", 9}};  // above source size -> replacement
    spec.seed = 21;
    MixtureStats stats;
    auto a = build_mixture(spec, sources, &stats);
    auto b = build_mixture(spec, sources);
    REQUIRE(a.size() == 9);
    CHECK(stats.with_replacement_sources == std::vector<std::string>{"s"});
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].user == b[i].user);
    }
    CHECK_THROWS_AS(build_mixture(MixtureSpec{{{"missing", 1}}, 0}, sources),
                    std::invalid_argument);
}

TEST_CASE("jsonl corpus loads fields and rejects malformed lines") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "minipost_data_test";
    fs::create_directories(dir);
    const auto good = dir / "good.jsonl";
    {
        std::ofstream os(good);
        os << R"({"user":"hi","response":"yo"})" << "\n";
        os << "\n";  // blank lines are skipped
        os << R"({"system":"s","user":"u","response":"r","constraints":["c1"],"source_tag":"t"})"
           << "\n";
    }
    auto corpus = load_jsonl_corpus(good, "fallback");
    REQUIRE(corpus.size() == 2);
    CHECK(corpus[0].source_tag == "fallback");
    CHECK(corpus[1].source_tag == "t");
    CHECK(corpus[1].constraints == std::vector<std::string>{"c1"});

    const auto bad = dir / "bad.jsonl";
    {
        std::ofstream os(bad);
        os << R"({"user":"hi","response":"yo"})" << "\n";
        os << R"({"user":"missing response"})" << "\n";
    }
    CHECK_THROWS_WITH_AS(load_jsonl_corpus(bad), doctest::Contains(":2:"),
                         std::runtime_error);
}
