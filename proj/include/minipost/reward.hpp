#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <filesystem>

namespace minipost {

// Accuracy 0..2 as judged against the reference answer; the error flag
// marks verdicts that fell back to 0 because the judge reply could not be
// parsed (such verdicts are excluded from reward statistics).
struct JudgeVerdict {
    int score = 0;  // in {0, 1, 2}
    std::string explanation;
    bool error = false;
};

struct RewardBreakdown {
    int r_acc = 0;               // {0, 1, 2}
    int r_format = 0;            // {0, 1}
    double overlong_penalty = 0; // <= 0
    double total = 0;
    bool judge_error = false;
};

// 1 iff exactly one well-formed <thinking>...</thinking> pair opens the
// response (leading whitespace allowed) and nonempty final content follows
// the closing tag.
int format_reward(std::string_view response);

// total = 0.9 * (r_acc / 2) + 0.1 * r_format + overlong_penalty
double combine(int r_acc, int r_format, double overlong_penalty);

// 0 until the soft cap (max_len - buffer_len), linear ramp to -1 at
// max_len, -1 for responses truncated at the cap.
double overlong_shaping(int response_len, int max_len, int buffer_len);

// lowercase, trim, collapse whitespace runs
std::string normalize_answer(std::string_view text);

class Judge {
public:
    virtual ~Judge() = default;
    virtual JudgeVerdict evaluate(const std::string& prompt,
                                  const std::string& response,
                                  const std::string& reference) = 0;
};

// Alias tables map a reference answer to acceptable partial-credit
// spellings; comparisons happen on normalized strings.
using AliasTable = std::map<std::string, std::vector<std::string>>;
AliasTable load_alias_table(const std::filesystem::path& path);

// Deterministic desk-scale judge: normalized match scores 2, a registered
// alias scores 1, anything else 0.
class ProgrammaticJudge : public Judge {
public:
    ProgrammaticJudge() = default;
    explicit ProgrammaticJudge(AliasTable aliases) : aliases_(std::move(aliases)) {}
    JudgeVerdict evaluate(const std::string& prompt, const std::string& response,
                          const std::string& reference) override;

private:
    AliasTable aliases_;
};

// Verbatim master prompt template and the accuracy-criteria sub-template;
// render_judge_prompt is byte-stable in its inputs.
const std::string& judge_prompt_template();
const std::string& accuracy_criteria_template();
std::string render_judge_prompt(const std::string& criteria,
                                const std::string& prompt,
                                const std::string& response,
                                const std::string& ground_truth);

// Sends a rendered prompt to some completion backend and returns the raw
// reply text.
using CompletionFn = std::function<std::string(const std::string&)>;

// Protocol judge: renders the template, invokes the completer, parses a
// JSON object {"score", "explanation"} out of the reply. An unparseable
// reply is retried once, then scored 0 with the error flag set.
class TemplateJudge : public Judge {
public:
    explicit TemplateJudge(CompletionFn completer)
        : completer_(std::move(completer)) {}
    JudgeVerdict evaluate(const std::string& prompt, const std::string& response,
                          const std::string& reference) override;

private:
    CompletionFn completer_;
};

// Reference remote transport: POST {"prompt": ...} to host:port/path and
// return the response body. In-flight requests are bounded by
// max_in_flight. Disabled by default in all configs; exercised against a
// mock endpoint in tests.
class HttpJudgeClient {
public:
    HttpJudgeClient(std::string host, int port, std::string path,
                    int max_in_flight = 4);
    ~HttpJudgeClient();
    std::string complete(const std::string& prompt);
    CompletionFn as_completion_fn();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace minipost
