#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "minipost/rng.hpp"
#include "minipost/tokens.hpp"

namespace minipost {

// One instruction-tuning record. Constraints are free-text requirements
// that placement augmentation folds into either the system or the user
// text.
struct InstructionExample {
    std::string system;
    std::string user;
    std::vector<std::string> constraints;
    std::string response;
    std::string source_tag;

    void validate() const;  // user and response must be nonempty
};

// With probability 1/2 the constraints move into the system field,
// otherwise they are concatenated after the user instruction. Constraint
// text itself is copied verbatim. Empty constraint lists are a no-op.
InstructionExample augment_placement(InstructionExample ex, Rng& rng);
InstructionExample augment_placement(InstructionExample ex, std::uint64_t seed);

// Deterministic chat template:
//   <sys> system <usr> user <asst> response <eos>
// Loss mask is 1 exactly on the response bytes and the closing <eos>.
TokenSequence render(const InstructionExample& ex);

// Several examples packed back to back into one fixed-length row. Segment
// boundaries record [begin, end) of each example; the model is forwarded
// per segment, so attention and positions never cross examples. The tail
// is <pad> with mask 0.
struct PackedBatch {
    std::vector<int> tokens;
    std::vector<std::uint8_t> loss_mask;
    std::vector<std::pair<int, int>> segments;
    int pack_len = 0;
};

struct PackStats {
    std::size_t packed = 0;
    std::size_t skipped_oversize = 0;
};

// First-fit greedy packing in stream order. Oversize examples are skipped
// and counted.
std::vector<PackedBatch> pack(const std::vector<TokenSequence>& examples,
                              int pack_len, PackStats* stats = nullptr);

struct MixtureSpec {
    std::vector<std::pair<std::string, std::size_t>> counts;  // (source_tag, n)
    std::uint64_t seed = 0;
};

struct MixtureStats {
    std::vector<std::string> with_replacement_sources;
};

// Exact per-source sample counts, then a global shuffle; deterministic
// under the spec seed. Counts above the source size fall back to sampling
// with replacement (recorded in stats).
std::vector<InstructionExample> build_mixture(
    const MixtureSpec& spec,
    const std::map<std::string, std::vector<InstructionExample>>& sources,
    MixtureStats* stats = nullptr);

// JSON Lines corpus: one object per line with fields system (optional),
// user, constraints (optional string array), response, source_tag
// (optional; falls back to default_tag). Malformed lines raise with the
// 1-based line number.
std::vector<InstructionExample> load_jsonl_corpus(
    const std::filesystem::path& path, std::string_view default_tag = "");

}  // namespace minipost
