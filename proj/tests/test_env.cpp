#include <doctest.h>

#include <algorithm>
#include <set>

#include "minipost/env.hpp"
#include "minipost/synth.hpp"

using namespace minipost;

namespace {

DocumentStore small_store() {
    return DocumentStore({{"a1", "the cat sat on the mat"},
                          {"b2", "quantum flux capacitors hum"},
                          {"c3", "cats and mats and hats"}});
}

TokenSequence text_turn(const std::string& text) {
    TokenSequence out;
    for (int id : tok::encode_bytes(text)) out.push_back(id, 1);
    out.push_back(tok::kEos, 1);
    return out;
}

}  // namespace

TEST_CASE("embed_text is deterministic and unit norm") {
    const auto a = embed_text("alpha beta");
    const auto b = embed_text("alpha beta");
    CHECK(a == b);
    CHECK(std::abs(a.norm() - 1.0) < 1e-9);
    CHECK(std::abs(embed_text("x").norm() - 1.0) < 1e-9);
    CHECK_THROWS_AS(embed_text(""), std::invalid_argument);
}

TEST_CASE("embedding similarity orders related text above unrelated text") {
    const auto base = embed_text("alpha beta");
    const double related = base.dot(embed_text("alpha beta gamma"));
    const double unrelated = base.dot(embed_text("zzz qqq"));
    CHECK(related > unrelated);
}

TEST_CASE("document store enforces unique nonempty ids") {
    CHECK_THROWS_AS(DocumentStore({{"a", "x"}, {"a", "y"}}), std::invalid_argument);
    CHECK_THROWS_AS(DocumentStore({{"", "x"}}), std::invalid_argument);
    CHECK_THROWS_AS(DocumentStore({}), std::invalid_argument);
}

TEST_CASE("search on a single-document store returns it for any query") {
    DocumentStore store({{"only", "some text"}});
    for (const char* q : {"anything", "some text", "zzz"}) {
        auto hits = store.search(q);
        REQUIRE(hits.size() == 1);
        CHECK(hits[0].doc_id == "only");
    }
}

TEST_CASE("self-retrieval ranks the exact document first") {
    auto store = small_store();
    auto hits = store.search("quantum flux capacitors hum");
    REQUIRE(hits.size() == 3);
    CHECK(hits[0].doc_id == "b2");
    CHECK(hits[0].score == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(hits[0].score >= hits[1].score);
    CHECK(hits[1].score >= hits[2].score);
}

TEST_CASE("search matches a brute-force oracle exactly on random stores") {
    Rng rng(derive_seed(5, "search-oracle"));
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(64));
        std::vector<Document> docs;
        for (int i = 0; i < n; ++i) {
            std::string text;
            const int len = 3 + static_cast<int>(rng.below(20));
            for (int c = 0; c < len; ++c) {
                text.push_back(static_cast<char>('a' + rng.below(6)));
            }
            docs.push_back({"doc" + std::to_string(i), text});
        }
        // duplicate one text occasionally to exercise the tie rule
        if (n > 2 && rng.bernoulli(0.5)) {
            docs[0].text = docs[1].text;
        }
        DocumentStore store(docs);
        std::string query;
        for (int c = 0; c < 6; ++c) query.push_back(static_cast<char>('a' + rng.below(6)));

        const auto q = embed_text(query, store.embed_dim());
        std::vector<std::pair<double, std::string>> ranked;
        for (const auto& d : docs) {
            ranked.emplace_back(embed_text(d.text, store.embed_dim()).dot(q), d.doc_id);
        }
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        auto hits = store.search(query);
        REQUIRE(hits.size() == std::min<std::size_t>(3, docs.size()));
        for (std::size_t i = 0; i < hits.size(); ++i) {
            CHECK(hits[i].doc_id == ranked[i].second);
            CHECK(hits[i].score == ranked[i].first);
        }
    }
}

TEST_CASE("read returns text, structured errors and truncation markers") {
    auto store = small_store();
    CHECK(store.read("a1", 1024) == "the cat sat on the mat");
    CHECK(store.read("nope", 1024) == "ERROR: unknown document");

    std::string long_text(2000, 'x');
    DocumentStore big({{"big", long_text}});
    const std::string out = big.read("big", 1024);
    CHECK(out.size() == 1024 + std::string("\n[truncated]").size());
    CHECK(out.find("[truncated]") != std::string::npos);
}

TEST_CASE("tool grammar parse table") {
    CHECK(parse_tool_call("plain answer").status == ToolParse::kNone);
    auto ok = parse_tool_call("let me look\n<tool>search: cats on mats</tool>");
    CHECK(ok.status == ToolParse::kOk);
    CHECK(ok.call.kind == ToolCall::Kind::kSearch);
    CHECK(ok.call.argument == "cats on mats");
    auto rd = parse_tool_call("<tool>read: a1</tool> trailing ignored");
    CHECK(rd.status == ToolParse::kOk);
    CHECK(rd.call.kind == ToolCall::Kind::kRead);
    CHECK(rd.call.argument == "a1");
    CHECK(parse_tool_call("<tool>search: x").status == ToolParse::kMalformed);
    CHECK(parse_tool_call("<tool>frobnicate: x</tool>").status == ToolParse::kMalformed);
    CHECK(parse_tool_call("<tool>search:</tool>").status == ToolParse::kMalformed);
    CHECK(parse_tool_call("<tool>no colon</tool>").status == ToolParse::kMalformed);
}

TEST_CASE("answer-only turn terminates the episode with that answer") {
    auto store = small_store();
    Episode ep(&store, EnvConfig{}, "", "where is the cat?");
    ep.step(text_turn("on the mat"));
    CHECK(ep.terminal());
    CHECK(ep.trajectory().final_answer == "on the mat");
    CHECK(ep.trajectory().assistant_turns == 1);
    CHECK_THROWS_AS(ep.step(text_turn("again")), std::logic_error);
}

TEST_CASE("search call appends a tool turn with three hit lines") {
    auto store = small_store();
    Episode ep(&store, EnvConfig{}, "", "find cats");
    ep.step(text_turn("<tool>search: cat mat</tool>"));
    CHECK(!ep.terminal());
    const auto& turns = ep.trajectory().turns;
    REQUIRE(turns.back().role == TurnRole::kTool);
    const std::string& obs = turns.back().text;
    CHECK(std::count(obs.begin(), obs.end(), '\n') == 2);  // 3 lines
    // every mask bit in the tool turn is zero
    for (auto m : turns.back().tokens.loss_mask) CHECK(m == 0);
}

TEST_CASE("malformed tool syntax consumes the turn with an error observation") {
    auto store = small_store();
    Episode ep(&store, EnvConfig{}, "", "q");
    ep.step(text_turn("<tool>search broken"));
    CHECK(!ep.terminal());
    CHECK(ep.trajectory().turns.back().text == "ERROR: malformed tool call");
}

TEST_CASE("disabled tools produce error observations instead of results") {
    auto store = small_store();
    EnvConfig cfg;
    cfg.tools_enabled = false;
    Episode ep(&store, cfg, "", "q");
    ep.step(text_turn("<tool>search: cat</tool>"));
    CHECK(ep.trajectory().turns.back().text == "ERROR: tools disabled");
}

TEST_CASE("five consecutive tool calls force termination at the budget") {
    auto store = small_store();
    Episode ep(&store, EnvConfig{}, "", "q");
    for (int i = 0; i < 4; ++i) {
        ep.step(text_turn("<tool>search: cat</tool>"));
        CHECK(!ep.terminal());
    }
    ep.step(text_turn("<tool>search: cat</tool>"));
    CHECK(ep.terminal());
    CHECK(ep.trajectory().assistant_turns == 5);
    // the unexecuted call text stands as the answer
    CHECK(ep.trajectory().final_answer == "<tool>search: cat</tool>");
}

TEST_CASE("scripted search-read-answer trajectory has the expected shape") {
    auto store = small_store();
    int stage = 0;
    TurnPolicy policy = [&](const TokenSequence&, Rng&) {
        const char* texts[] = {"<tool>search: quantum</tool>",
                               "<tool>read: b2</tool>", "the flux hums"};
        return text_turn(texts[stage++]);
    };
    Rng rng(1);
    Trajectory t = collect_trajectory(policy, &store, EnvConfig{}, "", "what hums?", rng);
    CHECK(t.terminal);
    CHECK(t.assistant_turns == 3);
    CHECK(t.final_answer == "the flux hums");
    int tool_turns = 0;
    std::size_t total_tokens = 0;
    for (const auto& turn : t.turns) {
        total_tokens += turn.tokens.size();
        if (turn.role == TurnRole::kTool) {
            ++tool_turns;
            for (auto m : turn.tokens.loss_mask) CHECK(m == 0);
        }
        if (turn.role == TurnRole::kUser || turn.role == TurnRole::kSystem) {
            for (auto m : turn.tokens.loss_mask) CHECK(m == 0);
        }
    }
    CHECK(tool_turns == 2);
    CHECK(t.flatten().size() == total_tokens);
    // the read observation contains the document text
    CHECK(t.turns[4].text == "quantum flux capacitors hum");
}

TEST_CASE("trajectories are deterministic under a scripted policy") {
    auto store = small_store();
    auto run = [&]() {
        int stage = 0;
        TurnPolicy policy = [&](const TokenSequence&, Rng&) {
            const char* texts[] = {"<tool>search: cat</tool>", "done"};
            return text_turn(texts[stage++]);
        };
        Rng rng(9);
        return collect_trajectory(policy, &store, EnvConfig{}, "sys", "q?", rng);
    };
    const auto a = run().flatten();
    const auto b = run().flatten();
    CHECK(a.ids == b.ids);
    CHECK(a.loss_mask == b.loss_mask);
}

TEST_CASE("empty generation yields an empty final answer") {
    auto store = small_store();
    Episode ep(&store, EnvConfig{}, "", "q");
    TokenSequence empty;
    ep.step(empty);
    CHECK(ep.terminal());
    CHECK(ep.trajectory().final_answer.empty());
}

TEST_CASE("trace export captures roles, text and mask counts") {
    auto store = small_store();
    Episode ep(&store, EnvConfig{}, "", "q");
    ep.step(text_turn("fin"));
    const auto j = ep.trajectory().to_json();
    CHECK(j.at("terminal") == true);
    CHECK(j.at("final_answer") == "fin");
    CHECK(j.at("turns").size() == 2);
    CHECK(j.at("turns")[0].at("role") == "user");
    CHECK(j.at("turns")[1].at("role") == "assistant");
}

TEST_CASE("fact task generator produces distinct retrievable facts") {
    auto task = make_fact_task(32, 7);
    REQUIRE(task.documents.size() == 32);
    REQUIRE(task.qas.size() == 32);
    std::set<std::string> keys, values, ids;
    for (const auto& qa : task.qas) {
        keys.insert(qa.question);
        values.insert(qa.answer);
    }
    for (const auto& d : task.documents) ids.insert(d.doc_id);
    CHECK(keys.size() == 32);
    CHECK(values.size() == 32);
    CHECK(ids.size() == 32);
    // answers appear only in the matching document
    for (std::size_t i = 0; i < task.qas.size(); ++i) {
        const auto& qa = task.qas[i];
        int containing = 0;
        for (const auto& d : task.documents) {
            if (d.text.find(qa.answer) != std::string::npos) ++containing;
        }
        CHECK(containing == 1);
        CHECK(task.documents[i].text.find(qa.answer) != std::string::npos);
    }
    // deterministic under seed
    auto again = make_fact_task(32, 7);
    CHECK(again.documents[5].text == task.documents[5].text);
    // the matching document ranks first for its own question
    DocumentStore store(task.documents);
    for (int i = 0; i < 5; ++i) {
        CHECK(store.search(task.qas[i].question)[0].doc_id == task.qas[i].doc_id);
    }
}

TEST_CASE("tool demos carry gradient mask only on assistant tokens") {
    auto task = make_fact_task(4, 11);
    DocumentStore store(task.documents);
    auto demos = make_tool_demos(task, store, EnvConfig{});
    REQUIRE(demos.size() == 4);
    for (const auto& demo : demos) {
        demo.validate();
        std::size_t ones = 0;
        for (auto m : demo.loss_mask) ones += m;
        CHECK(ones > 0);
    }
}

TEST_CASE("echo corpus words are distinct and well formed") {
    auto corpus = make_echo_corpus(20, 3, 3, 6);
    REQUIRE(corpus.size() == 20);
    std::set<std::string> words;
    for (const auto& ex : corpus) {
        CHECK(ex.user.rfind("echo ", 0) == 0);
        CHECK(ex.user.substr(5) == ex.response);
        words.insert(ex.response);
    }
    CHECK(words.size() == 20);
}
