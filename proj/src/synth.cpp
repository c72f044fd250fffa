#include "minipost/synth.hpp"

#include <set>
#include <stdexcept>

namespace minipost {

namespace {

std::string make_word(Rng& rng, int min_len, int max_len) {
    static const char consonants[] = "bcdfgklmnprstvz";
    static const char vowels[] = "aeiou";
    const int len = min_len + static_cast<int>(rng.below(
                                  static_cast<std::uint64_t>(max_len - min_len + 1)));
    std::string word;
    for (int i = 0; i < len; ++i) {
        if (i % 2 == 0) {
            word.push_back(consonants[rng.below(sizeof(consonants) - 1)]);
        } else {
            word.push_back(vowels[rng.below(sizeof(vowels) - 1)]);
        }
    }
    return word;
}

}  // namespace

FactTask make_fact_task(int n_facts, std::uint64_t seed) {
    if (n_facts < 1 || n_facts > 800) {
        throw std::invalid_argument("make_fact_task: n_facts out of range");
    }
    Rng rng(derive_seed(seed, "fact-task"));
    std::set<std::string> keys;
    while (static_cast<int>(keys.size()) < n_facts) {
        keys.insert(make_word(rng, 5, 7));
    }
    std::set<int> values;
    while (static_cast<int>(values.size()) < n_facts) {
        values.insert(100 + static_cast<int>(rng.below(900)));
    }
    FactTask task;
    auto key_it = keys.begin();
    auto value_it = values.begin();
    for (int i = 0; i < n_facts; ++i, ++key_it, ++value_it) {
        char id[16];
        std::snprintf(id, sizeof(id), "d%03d", i);
        const std::string key = *key_it;
        const std::string value = std::to_string(*value_it);
        task.documents.push_back({id, key + "? " + value + "."});
        task.qas.push_back({key + "?", value, id});
    }
    return task;
}

std::vector<InstructionExample> fact_qa_examples(const FactTask& task,
                                                 const std::string& source_tag) {
    std::vector<InstructionExample> out;
    out.reserve(task.qas.size());
    for (const auto& qa : task.qas) {
        InstructionExample ex;
        ex.user = qa.question;
        ex.response = qa.answer;
        ex.source_tag = source_tag;
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<InstructionExample> make_echo_corpus(int n, std::uint64_t seed,
                                                 int min_len, int max_len) {
    Rng rng(derive_seed(seed, "echo-corpus"));
    std::set<std::string> words;
    while (static_cast<int>(words.size()) < n) {
        words.insert(make_word(rng, min_len, max_len));
    }
    std::vector<InstructionExample> out;
    for (const auto& word : words) {
        InstructionExample ex;
        ex.user = "echo " + word;
        ex.response = word;
        ex.source_tag = "echo";
        out.push_back(std::move(ex));
    }
    Rng shuffle_rng(derive_seed(seed, "echo-shuffle"));
    shuffle_rng.shuffle(out);
    return out;
}

std::vector<TokenSequence> make_tool_demos(const FactTask& task,
                                           const DocumentStore& store,
                                           const EnvConfig& cfg) {
    std::vector<TokenSequence> demos;
    demos.reserve(task.qas.size());
    for (const auto& qa : task.qas) {
        int stage = 0;
        std::string read_id;
        TurnPolicy scripted = [&](const TokenSequence& /*ctx*/, Rng&) {
            std::string text;
            if (stage == 0) {
                text = "<tool>search: " + qa.question + "</tool>";
            } else if (stage == 1) {
                text = "<tool>read: " + read_id + "</tool>";
            } else {
                text = qa.answer;
            }
            ++stage;
            TokenSequence out;
            for (int id : tok::encode_bytes(text)) out.push_back(id, 1);
            out.push_back(tok::kEos, 1);
            return out;
        };
        // the demonstration reads whatever search ranked first, mirroring
        // the behavior the agent must learn
        read_id = store.search(qa.question, 1).at(0).doc_id;
        Rng rng(0);
        Trajectory t = collect_trajectory(scripted, &store, cfg, "", qa.question, rng);
        demos.push_back(t.flatten());
    }
    return demos;
}

}  // namespace minipost
