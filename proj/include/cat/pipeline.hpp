#pragma once

#include <cat/checkpoint.hpp>
#include <cat/config.hpp>
#include <cat/data.hpp>
#include <cat/metrics.hpp>
#include <cat/model.hpp>

#include <functional>
#include <string>
#include <vector>

namespace cat {

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainData {
    std::vector<EncodedExample> train;
    std::vector<EncodedExample> dev;
    Vocab vocab;
};

// Merges, windows, and encodes both corpora. Without a dev corpus every
// tenth training example is held out instead. A resumed run passes the
// checkpoint vocabulary as `fixed_vocab`; fresh runs build one from the
// training examples.
TrainData prepare_training_data(const std::vector<RawDialogue>& train_corpus,
                                const std::vector<RawDialogue>* dev_corpus,
                                const ModelConfig& cfg, const Vocab* fixed_vocab = nullptr);

struct EpochLog {
    int epoch = 0;
    double pass1_mean = 0.0; // per-token NLL of the draft pass
    double pass2_mean = 0.0; // per-token NLL of the refined pass
    double total_mean = 0.0; // joint objective per token
    double dev_mean = 0.0;   // teacher-forced joint loss per token on dev
    double seconds = 0.0;
};

struct TrainResult {
    ModelConfig config;
    Vocab vocab;
    CatModel model;
    AdamStateT<float> adam;
    std::vector<EpochLog> log;
    int best_epoch = 0; // lowest dev loss; 0 when no dev set
};

// Called after every epoch; gives checkpoint writers access to the live
// model and optimizer state.
using EpochCallback = std::function<void(const EpochLog&, const CatModel&, AdamStateT<float>&)>;

// Fresh training run. Deterministic in cfg.seed: parameter init, dropout,
// and shuffling all derive from it. Throws on non-finite loss with a
// diagnostic naming the epoch and example.
TrainResult train_model(const ModelConfig& cfg, const TrainData& data,
                        const EpochCallback& on_epoch = {});

// Continuation of an existing model/optimizer pair for `extra_epochs` more
// epochs (epoch numbering resumes at start_epoch + 1). Parameter tensors are
// shared handles, so the run trains the caller's model in place; to branch
// several runs off one snapshot, reload it from a checkpoint each time.
TrainResult resume_training(const ModelConfig& cfg, const TrainData& data, CatModel model,
                            AdamStateT<float> adam, int start_epoch, int extra_epochs,
                            const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct ExampleEval {
    int index = 0;
    bool sampled = false;
    bool transfer = false;
    double nll = 0.0; // pass-2 reference NLL, EOS included
    int tokens = 0;
    Tokens hypothesis;
    RougeL rouge;
    KUResult ku2, ku3;
    QKUTriple qku2, qku3;
    double gate = 0.0;
    bool gated = false;
};

struct SplitMetrics {
    long count = 0;
    double ppl = 0.0;
    double bleu = 0.0;
    double rouge_p = 0.0, rouge_r = 0.0, rouge_f = 0.0;
    double ku2_mean = 0.0, ku3_mean = 0.0;
    long ku2_defined = 0, ku3_defined = 0;
    QKUCorpus qku2, qku3;
    double mean_gate = 0.0;
    long gated = 0;
};

struct EvalResult {
    SplitMetrics all, reduced, sampled;
    std::vector<ExampleEval> per_example;
};

// Scores every example (teacher-forced PPL) and, when `decode` is set, beam
// decodes hypotheses and computes the overlap metrics against them.
EvalResult evaluate_model(const CatModel& model, const Vocab& vocab, const ModelConfig& cfg,
                          const std::vector<DialogueExample>& examples, bool decode = true);

// report.json / report.txt / per_example.csv / hypotheses.txt / decoded.jsonl
void write_eval_report(const std::string& out_dir, const EvalResult& result,
                       const std::vector<DialogueExample>& examples);

// Computes the overlap metrics (BLEU, ROUGE-L, KU, QKU) for pre-decoded
// records, e.g. a decoded.jsonl produced by an earlier run.
SplitMetrics score_eval_records(const std::vector<EvalRecord>& records, bool bleu_smoothing);

// ---------------------------------------------------------------------------
// gate diagnostics
// ---------------------------------------------------------------------------

struct GateReportRow {
    int rounds = 0;
    long n = 0;
    double mean_g = 0.0;
    double std_g = 0.0;
    long flagged = 0; // examples probed with the zero-history convention
};

// Re-windows the corpus per requested history-rounds setting and probes the
// relevance gate on every example. The model must expose a gate (DD family).
std::vector<GateReportRow> gate_report(const CatModel& model, const Vocab& vocab,
                                       const ModelConfig& cfg,
                                       const std::vector<RawDialogue>& corpus,
                                       const std::vector<int>& rounds_list);

// ---------------------------------------------------------------------------
// synthetic corpus files
// ---------------------------------------------------------------------------

struct SynthSizes {
    int train = 1000;
    int dev = 100;
    int test = 100;
};

// Writes train/dev/test.jsonl plus manifest.json into out_dir. Split seeds
// derive from `seed` so each split draws distinct dialogues.
void write_synth_corpus(const std::string& out_dir, std::uint64_t seed, const SynthSizes& sizes,
                        double transfer_fraction);

} // namespace cat
