#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "minipost/data.hpp"
#include "minipost/env.hpp"

namespace minipost {

// Synthetic key -> value fact tasks: N short documents of the form
// "<key>? <value>." whose values appear nowhere else, question "<key>?"
// answered only by the matching document. The desk-scale stand-in for an
// in-domain corpus.
struct FactQA {
    std::string question;
    std::string answer;
    std::string doc_id;
};

struct FactTask {
    std::vector<Document> documents;
    std::vector<FactQA> qas;  // one per document

    std::vector<std::string> document_texts() const {
        std::vector<std::string> out;
        out.reserve(documents.size());
        for (const auto& d : documents) out.push_back(d.text);
        return out;
    }
};

// Distinct pronounceable keys and distinct 3-digit values; deterministic
// under seed. Disjoint from any task built with a different seed tag.
FactTask make_fact_task(int n_facts, std::uint64_t seed);

// The QA pairs as instruction examples (user = question, response =
// answer).
std::vector<InstructionExample> fact_qa_examples(const FactTask& task,
                                                 const std::string& source_tag);

// Echo task: user "echo <word>", response "<word>", with n distinct words.
std::vector<InstructionExample> make_echo_corpus(int n, std::uint64_t seed,
                                                 int min_len, int max_len);

// Scripted search -> read -> answer demonstrations over the task's own
// store, used for behavior cloning. Tokens come from real episodes, so
// masks and tool observations match what training will see.
std::vector<TokenSequence> make_tool_demos(const FactTask& task,
                                           const DocumentStore& store,
                                           const EnvConfig& cfg);

}  // namespace minipost
