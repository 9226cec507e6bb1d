#include <cat/data.hpp>

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>

namespace cat {

namespace {

using nlohmann::json;

Tokens truncated(Tokens t, int limit) {
    if (static_cast<int>(t.size()) > limit) t.resize(limit);
    return t;
}

// Majority section over the known history labels; -1 on ties or when nothing
// is labeled. Ties deliberately count as "no majority" so they never land in
// the Sampled split.
int majority_section(const std::vector<int>& sections) {
    std::map<int, int> counts;
    for (int s : sections)
        if (s >= 0) ++counts[s];
    int best = -1, best_count = 0;
    bool tie = false;
    for (const auto& [section, count] : counts) {
        if (count > best_count) {
            best = section;
            best_count = count;
            tie = false;
        } else if (count == best_count) {
            tie = true;
        }
    }
    return tie ? -1 : best;
}

} // namespace

RawDialogue merge_speakers(const RawDialogue& raw) {
    if (raw.turns.empty()) throw std::invalid_argument("merge_speakers: dialogue has no turns");
    RawDialogue out;
    out.sections = raw.sections;
    for (const auto& turn : raw.turns) {
        if (!out.turns.empty() && out.turns.back().speaker == turn.speaker) {
            out.turns.back().text += " " + turn.text;
        } else {
            out.turns.push_back(turn);
        }
    }
    return out;
}

std::vector<DialogueExample> build_examples(const RawDialogue& merged, const BuildOptions& opt,
                                            BuildStats* stats) {
    if (opt.rounds < 0 || opt.remove_greetings < 0)
        throw std::invalid_argument("build_examples: rounds and remove_greetings must be >= 0");

    Tokens doc;
    for (const auto& section : merged.sections) {
        Tokens sec = metric_tokenize(section);
        doc.insert(doc.end(), sec.begin(), sec.end());
    }
    doc = truncated(std::move(doc), opt.doc_limit);

    std::vector<DialogueExample> out;
    const int n = static_cast<int>(merged.turns.size());
    const int first_target = opt.rounds > 0 ? 2 : 1;
    int eligible_seen = 0;
    for (int t = first_target; t < n; ++t) {
        if (eligible_seen++ < opt.remove_greetings) continue;

        DialogueExample ex;
        ex.document = doc;
        ex.response = truncated(metric_tokenize(merged.turns[t].text), opt.utt_limit);
        ex.last_utterance = truncated(metric_tokenize(merged.turns[t - 1].text), opt.utt_limit);
        // the model needs at least one token on each side; a blank turn or an
        // empty document makes the window unusable
        if (ex.document.empty() || ex.response.empty() || ex.last_utterance.empty()) continue;
        ex.last_section = merged.turns[t - 1].section;
        const int h_begin = std::max(0, t - 1 - opt.rounds);
        for (int h = h_begin; h < t - 1; ++h) {
            ex.history.push_back(truncated(metric_tokenize(merged.turns[h].text), opt.utt_limit));
            ex.history_sections.push_back(merged.turns[h].section);
        }
        const int h_major = majority_section(ex.history_sections);
        ex.has_sections = ex.last_section >= 0 && h_major >= 0;
        ex.topic_transfer = ex.has_sections && h_major != ex.last_section;
        out.push_back(std::move(ex));
    }
    if (stats) {
        ++stats->dialogues;
        stats->examples += static_cast<long>(out.size());
        if (out.empty()) ++stats->skipped_short;
    }
    return out;
}

std::vector<DialogueExample> build_examples(const std::vector<RawDialogue>& corpus,
                                            const BuildOptions& opt, BuildStats* stats) {
    std::vector<DialogueExample> out;
    for (const auto& raw : corpus) {
        auto exs = build_examples(merge_speakers(raw), opt, stats);
        out.insert(out.end(), std::make_move_iterator(exs.begin()),
                   std::make_move_iterator(exs.end()));
    }
    return out;
}

SplitView make_sampled_split(const std::vector<DialogueExample>& examples) {
    SplitView view;
    for (int i = 0; i < static_cast<int>(examples.size()); ++i) {
        if (examples[i].has_sections && examples[i].topic_transfer)
            view.sampled.push_back(i);
        else
            view.reduced.push_back(i);
    }
    return view;
}

Vocab::Vocab() : Vocab(std::vector<std::string>{"<pad>", "<unk>", "<bos>", "<eos>"}) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 4)
        throw std::invalid_argument("Vocab: token list must start with the reserved entries");
    for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
        if (!index_.emplace(tokens_[i], i).second)
            throw std::invalid_argument("Vocab: duplicate token '" + tokens_[i] + "'");
    }
}

Vocab Vocab::build(const std::vector<DialogueExample>& examples, int min_freq) {
    std::unordered_map<std::string, long> counts;
    auto tally = [&](const Tokens& words) {
        for (const auto& w : words) ++counts[w];
    };
    for (const auto& ex : examples) {
        tally(ex.document);
        for (const auto& turn : ex.history) tally(turn);
        tally(ex.last_utterance);
        tally(ex.response);
    }
    std::vector<std::pair<long, std::string>> kept;
    for (const auto& [word, freq] : counts)
        if (freq >= min_freq) kept.emplace_back(freq, word);
    // highest frequency first; lexicographic tie-break keeps ids deterministic
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<std::string> tokens = {"<pad>", "<unk>", "<bos>", "<eos>"};
    for (const auto& [freq, word] : kept) tokens.push_back(word);
    return Vocab(std::move(tokens));
}

int Vocab::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size())
        throw std::out_of_range("Vocab: id " + std::to_string(id) + " out of range [0, " +
                                std::to_string(size()) + ")");
    return tokens_[id];
}

std::vector<int> Vocab::encode(const Tokens& words) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
}

Tokens Vocab::decode(const std::vector<int>& ids) const {
    Tokens words;
    words.reserve(ids.size());
    for (int i : ids) words.push_back(token(i));
    return words;
}

std::uint64_t Vocab::hash() const {
    std::uint64_t h = 14695981039346656037ULL;
    auto mix = [&](char c) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    };
    for (const auto& t : tokens_) {
        for (char c : t) mix(c);
        mix('\n');
    }
    return h;
}

namespace {

RawDialogue dialogue_from_json(const json& j) {
    RawDialogue d;
    for (const auto& s : j.at("sections")) d.sections.push_back(s.get<std::string>());
    for (const auto& t : j.at("turns")) {
        Turn turn;
        turn.speaker = t.at("speaker").get<int>();
        turn.text = t.at("text").get<std::string>();
        if (t.contains("section")) turn.section = t.at("section").get<int>();
        d.turns.push_back(std::move(turn));
    }
    return d;
}

json dialogue_to_json(const RawDialogue& d) {
    json j;
    j["sections"] = d.sections;
    j["turns"] = json::array();
    for (const auto& t : d.turns) {
        json turn = {{"speaker", t.speaker}, {"text", t.text}};
        if (t.section >= 0) turn["section"] = t.section;
        j["turns"].push_back(std::move(turn));
    }
    return j;
}

} // namespace

std::vector<RawDialogue> load_corpus_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus file: " + path);
    std::vector<RawDialogue> corpus;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            corpus.push_back(dialogue_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return corpus;
}

void save_corpus_jsonl(const std::string& path, const std::vector<RawDialogue>& corpus) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write corpus file: " + path);
    for (const auto& d : corpus) out << dialogue_to_json(d).dump() << "\n";
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<EvalRecord> load_eval_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open eval file: " + path);
    std::vector<EvalRecord> records;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            EvalRecord r;
            r.document = j.at("document").get<std::string>();
            const auto& ctx = j.at("context");
            if (ctx.is_string()) {
                r.context_turns.push_back(ctx.get<std::string>());
            } else {
                for (const auto& turn : ctx) r.context_turns.push_back(turn.get<std::string>());
            }
            r.last_utterance = j.at("last_utterance").get<std::string>();
            r.reference = j.at("reference").get<std::string>();
            r.hypothesis = j.at("hypothesis").get<std::string>();
            records.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

namespace {

// Deterministic picks straight off the generator: uniform_int_distribution
// is implementation-defined, and corpus bytes must not depend on the stdlib.
std::uint64_t pick(std::mt19937_64& rng, std::uint64_t n) { return rng() % n; }

double unit(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

const std::vector<std::string> kTopics = {"museum",  "castle", "harbor", "market", "library",
                                          "theater", "garden", "bridge", "station", "tower"};
const std::vector<std::string> kYears = {"1820", "1875", "1890", "1903", "1911", "1927",
                                         "1934", "1948", "1952", "1969", "1977", "1985"};
const std::vector<std::string> kColors = {"red", "blue", "green", "white", "grey", "golden"};
const std::vector<std::string> kSizes = {"30", "45", "60", "80", "120", "200"};

const std::vector<std::string> kGreetA = {"hello there .", "hi , how are you ?",
                                          "good morning ."};
const std::vector<std::string> kGreetB = {"hello ! happy to chat .", "hi ! doing well , thanks .",
                                          "good morning to you too ."};

struct SectionFacts {
    std::string topic, year, color, size;
};

std::string section_text(const SectionFacts& f) {
    return "the " + f.topic + " was built in " + f.year + " . the " + f.topic + " is painted " +
           f.color + " . the " + f.topic + " measures " + f.size + " meters .";
}

// attribute 0 = year, 1 = color, 2 = size
std::string question(const SectionFacts& f, int attr) {
    switch (attr) {
        case 0: return "when was the " + f.topic + " built ?";
        case 1: return "what color is the " + f.topic + " ?";
        default: return "how large is the " + f.topic + " ?";
    }
}

// Same-topic follow-ups stay elliptical: the topic noun is never repeated,
// so only the history reveals what "it" refers to.
std::string elliptical_question(int attr) {
    switch (attr) {
        case 0: return "and when was it built ?";
        case 1: return "and what color is it ?";
        default: return "and how large is it ?";
    }
}

std::string answer(const SectionFacts& f, int attr) {
    switch (attr) {
        case 0: return "the " + f.topic + " was built in " + f.year + " .";
        case 1: return "the " + f.topic + " is painted " + f.color + " .";
        default: return "the " + f.topic + " measures " + f.size + " meters .";
    }
}

} // namespace

std::vector<RawDialogue> synth_corpus(const SynthConfig& cfg) {
    if (cfg.n_dialogues < 0) throw std::invalid_argument("synth_corpus: n_dialogues must be >= 0");
    if (cfg.transfer_fraction < 0.0 || cfg.transfer_fraction > 1.0)
        throw std::invalid_argument("synth_corpus: transfer_fraction must be in [0, 1]");

    std::mt19937_64 rng(cfg.seed);
    std::vector<RawDialogue> corpus;
    corpus.reserve(cfg.n_dialogues);
    for (int d = 0; d < cfg.n_dialogues; ++d) {
        const int n_sections = 2 + static_cast<int>(pick(rng, 3));

        // distinct topic per section
        std::vector<int> topic_ids;
        while (static_cast<int>(topic_ids.size()) < n_sections) {
            int t = static_cast<int>(pick(rng, kTopics.size()));
            if (std::find(topic_ids.begin(), topic_ids.end(), t) == topic_ids.end())
                topic_ids.push_back(t);
        }
        std::vector<SectionFacts> facts;
        RawDialogue dlg;
        for (int s = 0; s < n_sections; ++s) {
            SectionFacts f;
            f.topic = kTopics[topic_ids[s]];
            f.year = kYears[pick(rng, kYears.size())];
            f.color = kColors[pick(rng, kColors.size())];
            f.size = kSizes[pick(rng, kSizes.size())];
            dlg.sections.push_back(section_text(f));
            facts.push_back(std::move(f));
        }

        const bool transfer = unit(rng) < cfg.transfer_fraction;
        const int s1 = static_cast<int>(pick(rng, n_sections));
        const int a1 = static_cast<int>(pick(rng, 3));
        int s2 = s1, a2;
        if (transfer) {
            while (s2 == s1) s2 = static_cast<int>(pick(rng, n_sections));
            a2 = static_cast<int>(pick(rng, 3));
        } else {
            a2 = (a1 + 1 + static_cast<int>(pick(rng, 2))) % 3; // different attribute
        }

        dlg.turns.push_back({0, kGreetA[pick(rng, kGreetA.size())], -1});
        dlg.turns.push_back({1, kGreetB[pick(rng, kGreetB.size())], -1});
        dlg.turns.push_back({0, question(facts[s1], a1), s1});
        dlg.turns.push_back({1, answer(facts[s1], a1), s1});
        if (transfer)
            dlg.turns.push_back(
                {0, "let us talk about the " + facts[s2].topic + " . " + question(facts[s2], a2),
                 s2});
        else
            dlg.turns.push_back({0, elliptical_question(a2), s2});
        dlg.turns.push_back({1, answer(facts[s2], a2), s2});
        corpus.push_back(std::move(dlg));
    }
    return corpus;
}

} // namespace cat
