#pragma once

#include <cat/metrics.hpp>

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace cat {

// A dialogue as stored on disk: the grounding document (split into sections)
// plus the turn sequence. `section` is the index of the section a turn draws
// on, or -1 when unknown.
struct Turn {
    int speaker = 0;
    std::string text;
    int section = -1;
};

struct RawDialogue {
    std::vector<std::string> sections;
    std::vector<Turn> turns;
};

// Joins adjacent same-speaker turns with a space so speakers strictly
// alternate. Section labels survive when the merged turns agree; a mixed
// merge keeps the first turn's label.
RawDialogue merge_speakers(const RawDialogue& raw);

// One training/eval unit: tokenized document, history turns (oldest first),
// last utterance, and target response. Tokens are kept as words here;
// encoding to ids happens against a Vocab at model-feeding time.
struct DialogueExample {
    Tokens document;
    std::vector<Tokens> history;
    Tokens last_utterance;
    Tokens response;
    std::vector<int> history_sections;
    int last_section = -1;
    bool has_sections = false;   // last_section and at least one history section known
    bool topic_transfer = false; // majority(history sections) != last_section
};

struct BuildOptions {
    int rounds = 2;
    int remove_greetings = 2;
    int doc_limit = 800;
    int utt_limit = 40;
};

struct BuildStats {
    long dialogues = 0;
    long examples = 0;
    long skipped_short = 0; // dialogues with no eligible target at all
};

// Sliding-window extraction: every turn with a predecessor (and, when
// rounds > 0, at least one history turn before that) is a candidate target R,
// its predecessor is L, and up to `rounds` turns before L form H. The first
// `remove_greetings` candidates of each dialogue are dropped as greetings.
std::vector<DialogueExample> build_examples(const RawDialogue& merged, const BuildOptions& opt,
                                            BuildStats* stats = nullptr);

std::vector<DialogueExample> build_examples(const std::vector<RawDialogue>& corpus,
                                            const BuildOptions& opt, BuildStats* stats = nullptr);

// Indices of examples per evaluation split. Sampled keeps examples whose
// history-majority section differs from the last utterance's section;
// everything else (including unlabeled and majority ties) stays Reduced only.
struct SplitView {
    std::vector<int> reduced;
    std::vector<int> sampled;
};

SplitView make_sampled_split(const std::vector<DialogueExample>& examples);

// Word-level vocabulary with fixed reserved ids. Unknown tokens encode to
// kUnk; decode is the identity on kept tokens.
class Vocab {
  public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;

    Vocab();
    explicit Vocab(std::vector<std::string> tokens); // for checkpoint restore

    static Vocab build(const std::vector<DialogueExample>& examples, int min_freq = 2);

    int size() const { return static_cast<int>(tokens_.size()); }
    int id(const std::string& token) const;
    const std::string& token(int id) const;

    std::vector<int> encode(const Tokens& words) const;
    Tokens decode(const std::vector<int>& ids) const;

    const std::vector<std::string>& tokens() const { return tokens_; }
    std::uint64_t hash() const; // FNV-1a over the token list, order-sensitive

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// JSON-lines corpus IO. Each line: {"sections": [...], "turns": [{"speaker",
// "text", "section"?}]}. Parse errors name the line number.
std::vector<RawDialogue> load_corpus_jsonl(const std::string& path);
void save_corpus_jsonl(const std::string& path, const std::vector<RawDialogue>& corpus);

// Pre-decoded evaluation records for metric-only runs: one JSON object per
// line with {document, context (string or array of strings), last_utterance,
// reference, hypothesis}.
struct EvalRecord {
    std::string document;
    std::vector<std::string> context_turns;
    std::string last_utterance;
    std::string reference;
    std::string hypothesis;
};

std::vector<EvalRecord> load_eval_jsonl(const std::string& path);

// Synthetic topic-transfer corpus. Every dialogue is six turns: two
// greetings, a question/answer pair grounded in one document section, then a
// follow-up question that either stays on topic or explicitly switches
// section, and its answer. Preprocessing with rounds=2 and
// remove_greetings=3 therefore yields exactly one example per dialogue, with
// a clean topic-transfer label.
struct SynthConfig {
    std::uint64_t seed = 7;
    int n_dialogues = 200;
    double transfer_fraction = 0.5;
};

std::vector<RawDialogue> synth_corpus(const SynthConfig& cfg);

} // namespace cat
