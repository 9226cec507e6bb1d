#include <cat/pipeline.hpp>

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace cat {

namespace {

using nlohmann::json;

std::vector<EncodedExample> encode_all(const std::vector<DialogueExample>& examples,
                                       const Vocab& vocab) {
    std::vector<EncodedExample> out;
    out.reserve(examples.size());
    for (const auto& ex : examples) out.push_back(encode_example(ex, vocab));
    return out;
}

std::string join(const Tokens& words) {
    std::string s;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) s += ' ';
        s += words[i];
    }
    return s;
}

// Teacher-forced joint loss per token, no dropout, no graph.
double held_out_loss(const CatModel& model, const std::vector<EncodedExample>& dev,
                     float label_smoothing) {
    if (dev.empty()) return 0.0;
    NoGradGuard ng;
    RunState rs;
    double sum = 0.0;
    long tokens = 0;
    for (const auto& ex : dev) {
        auto loss = model.example_loss(ex, rs, label_smoothing);
        sum += loss.raw();
        tokens += loss.tokens;
    }
    return tokens > 0 ? sum / static_cast<double>(tokens) : 0.0;
}

TrainResult train_core(const ModelConfig& cfg, const TrainData& data, CatModel model,
                       AdamStateT<float> adam, int start_epoch, int n_epochs,
                       const EpochCallback& on_epoch) {
    NamedParamsT<float> named = model.params();
    std::vector<Tensor> params;
    params.reserve(named.size());
    for (auto& [name, t] : named) params.push_back(t);

    std::mt19937 dropout_rng(static_cast<std::uint32_t>(cfg.seed) + 1);
    std::mt19937 shuffle_rng(static_cast<std::uint32_t>(cfg.seed) + 2);

    TrainResult result;
    result.config = cfg;
    result.vocab = data.vocab;

    std::vector<int> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);

    double best_dev = std::numeric_limits<double>::infinity();
    for (int e = 0; e < n_epochs; ++e) {
        const int epoch = start_epoch + e + 1;
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double pass1 = 0.0, pass2 = 0.0;
        long tokens = 0;
        for (size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const size_t end = std::min(order.size(), begin + cfg.batch_size);
            long batch_tokens = 0;
            for (size_t b = begin; b < end; ++b)
                batch_tokens += static_cast<long>(data.train[order[b]].response.size()) + 1;

            for (auto& p : params) p.zero_grad();
            for (size_t b = begin; b < end; ++b) {
                RunState rs;
                rs.training = true;
                rs.dropout = cfg.dropout;
                rs.rng = &dropout_rng;
                auto loss = model.example_loss(data.train[order[b]], rs,
                                               static_cast<float>(cfg.label_smoothing));
                if (!std::isfinite(loss.raw()))
                    throw std::runtime_error(
                        "training aborted: non-finite loss at epoch " + std::to_string(epoch) +
                        ", example " + std::to_string(order[b]) + " (pass1 " +
                        std::to_string(loss.pass1) + ", pass2 " + std::to_string(loss.pass2) + ")");
                backward(scale(loss.sum, 1.0f / static_cast<float>(batch_tokens)));
                pass1 += loss.pass1;
                pass2 += loss.pass2;
                tokens += loss.tokens;
            }
            adam.update(params);
        }

        EpochLog log;
        log.epoch = epoch;
        log.pass1_mean = tokens > 0 ? pass1 / tokens : 0.0;
        log.pass2_mean = tokens > 0 ? pass2 / tokens : 0.0;
        log.total_mean = log.pass1_mean + log.pass2_mean;
        log.dev_mean = held_out_loss(model, data.dev, static_cast<float>(cfg.label_smoothing));
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(log);
        if (!data.dev.empty() && log.dev_mean < best_dev) {
            best_dev = log.dev_mean;
            result.best_epoch = epoch;
        }
        if (on_epoch) on_epoch(log, model, adam);
    }
    result.model = std::move(model);
    result.adam = std::move(adam);
    return result;
}

} // namespace

TrainData prepare_training_data(const std::vector<RawDialogue>& train_corpus,
                                const std::vector<RawDialogue>* dev_corpus,
                                const ModelConfig& cfg, const Vocab* fixed_vocab) {
    BuildOptions opt;
    opt.rounds = cfg.rounds;
    opt.remove_greetings = cfg.remove_greetings;
    opt.doc_limit = cfg.doc_limit;
    opt.utt_limit = cfg.utt_limit;

    auto train_ex = build_examples(train_corpus, opt);
    std::vector<DialogueExample> dev_ex;
    if (dev_corpus) {
        dev_ex = build_examples(*dev_corpus, opt);
    } else {
        // hold out every tenth example
        std::vector<DialogueExample> kept;
        for (size_t i = 0; i < train_ex.size(); ++i) {
            if (i % 10 == 9)
                dev_ex.push_back(std::move(train_ex[i]));
            else
                kept.push_back(std::move(train_ex[i]));
        }
        train_ex = std::move(kept);
    }
    if (train_ex.empty()) throw std::runtime_error("training corpus produced no examples");

    TrainData data;
    data.vocab = fixed_vocab ? *fixed_vocab : Vocab::build(train_ex, cfg.vocab_min_freq);
    data.train = encode_all(train_ex, data.vocab);
    data.dev = encode_all(dev_ex, data.vocab);
    return data;
}

TrainResult train_model(const ModelConfig& cfg, const TrainData& data,
                        const EpochCallback& on_epoch) {
    cfg.validate();
    std::mt19937 init_rng(static_cast<std::uint32_t>(cfg.seed));
    CatModel model(cfg, data.vocab.size(), init_rng);
    AdamStateT<float> adam(cfg.adam);
    return train_core(cfg, data, std::move(model), std::move(adam), 0, cfg.epochs, on_epoch);
}

TrainResult resume_training(const ModelConfig& cfg, const TrainData& data, CatModel model,
                            AdamStateT<float> adam, int start_epoch, int extra_epochs,
                            const EpochCallback& on_epoch) {
    cfg.validate();
    return train_core(cfg, data, std::move(model), std::move(adam), start_epoch, extra_epochs,
                      on_epoch);
}

namespace {

SplitMetrics aggregate_split(const std::vector<ExampleEval>& per, const std::vector<Tokens>& refs,
                             const std::vector<int>& idx, bool decoded, bool bleu_smoothing) {
    SplitMetrics m;
    m.count = static_cast<long>(idx.size());
    double nll = 0.0;
    long tokens = 0;
    for (int i : idx) {
        nll += per[i].nll;
        tokens += per[i].tokens;
        if (per[i].gated) {
            m.mean_gate += per[i].gate;
            ++m.gated;
        }
    }
    m.ppl = tokens > 0 ? std::exp(nll / tokens) : 0.0;
    m.mean_gate = m.gated > 0 ? m.mean_gate / m.gated : 0.0;
    if (!decoded || idx.empty()) return m;

    std::vector<Tokens> hyps, picked_refs;
    for (int i : idx) {
        hyps.push_back(per[i].hypothesis);
        picked_refs.push_back(refs[i]);
        m.rouge_p += per[i].rouge.precision;
        m.rouge_r += per[i].rouge.recall;
        m.rouge_f += per[i].rouge.f;
        if (per[i].ku2.defined) {
            m.ku2_mean += per[i].ku2.value;
            ++m.ku2_defined;
        }
        if (per[i].ku3.defined) {
            m.ku3_mean += per[i].ku3.value;
            ++m.ku3_defined;
        }
        if (per[i].qku2.contributes) {
            m.qku2.raw_sum += per[i].qku2.ratio;
            ++m.qku2.contributing;
        } else {
            ++m.qku2.skipped;
        }
        if (per[i].qku3.contributes) {
            m.qku3.raw_sum += per[i].qku3.ratio;
            ++m.qku3.contributing;
        } else {
            ++m.qku3.skipped;
        }
    }
    m.bleu = bleu(hyps, picked_refs, bleu_smoothing);
    m.rouge_p /= static_cast<double>(idx.size());
    m.rouge_r /= static_cast<double>(idx.size());
    m.rouge_f /= static_cast<double>(idx.size());
    if (m.ku2_defined > 0) m.ku2_mean /= m.ku2_defined;
    if (m.ku3_defined > 0) m.ku3_mean /= m.ku3_defined;
    if (m.qku2.contributing > 0) m.qku2.mean = m.qku2.raw_sum / m.qku2.contributing;
    if (m.qku3.contributing > 0) m.qku3.mean = m.qku3.raw_sum / m.qku3.contributing;
    return m;
}

// history turns only; the last utterance travels in its own field
std::vector<std::string> context_strings(const DialogueExample& ex) {
    std::vector<std::string> ctx;
    for (const auto& turn : ex.history) ctx.push_back(join(turn));
    return ctx;
}

} // namespace

EvalResult evaluate_model(const CatModel& model, const Vocab& vocab, const ModelConfig& cfg,
                          const std::vector<DialogueExample>& examples, bool decode) {
    EvalResult result;
    const SplitView split = make_sampled_split(examples);
    std::vector<char> in_sampled(examples.size(), 0);
    for (int i : split.sampled) in_sampled[i] = 1;

    BeamConfig bc;
    bc.beam = cfg.beam;
    bc.max_len = cfg.max_decode_len;
    bc.eos = Vocab::kEos;
    bc.length_normalize = cfg.length_normalize;

    // Overlap metrics run on metric-normalized text so that scoring the
    // decoded.jsonl this produces gives back identical numbers.
    const auto norm = [](const Tokens& t) { return metric_tokenize(join(t)); };

    NoGradGuard ng;
    RunState rs;
    std::vector<Tokens> refs(examples.size());
    for (int i = 0; i < static_cast<int>(examples.size()); ++i) {
        const auto enc = encode_example(examples[i], vocab);
        const auto f = model.context_forward(enc, rs);

        ExampleEval ee;
        ee.index = i;
        ee.sampled = in_sampled[i] != 0;
        ee.transfer = examples[i].topic_transfer;
        std::tie(ee.nll, ee.tokens) = model.reference_nll(f, enc.response);
        if (f.gated) {
            ee.gate = static_cast<double>(f.gate_value.value());
            ee.gated = true;
        }
        if (decode) {
            const auto hyp = beam_decode(model.make_step_fn(f), bc);
            std::vector<int> surface;
            for (int id : hyp.tokens)
                if (id != Vocab::kPad && id != Vocab::kUnk && id != Vocab::kBos &&
                    id != Vocab::kEos)
                    surface.push_back(id);
            ee.hypothesis = norm(vocab.decode(surface));
            refs[i] = norm(examples[i].response);
            if (!refs[i].empty()) ee.rouge = rouge_l(ee.hypothesis, refs[i]);
            const auto ctx_turns = [&] {
                std::vector<Tokens> turns;
                for (const auto& turn : examples[i].history) turns.push_back(norm(turn));
                turns.push_back(norm(examples[i].last_utterance));
                return turns;
            }();
            const auto doc = norm(examples[i].document);
            const auto t2 = build_triple(doc, ctx_turns, ee.hypothesis, 2);
            const auto t3 = build_triple(doc, ctx_turns, ee.hypothesis, 3);
            ee.ku2 = ku(t2);
            ee.ku3 = ku(t3);
            ee.qku2 = qku_triple(t2);
            ee.qku3 = qku_triple(t3);
        }
        result.per_example.push_back(std::move(ee));
    }

    std::vector<int> all_idx(examples.size());
    std::iota(all_idx.begin(), all_idx.end(), 0);
    result.all = aggregate_split(result.per_example, refs, all_idx, decode, cfg.bleu_smoothing);
    result.reduced =
        aggregate_split(result.per_example, refs, split.reduced, decode, cfg.bleu_smoothing);
    result.sampled =
        aggregate_split(result.per_example, refs, split.sampled, decode, cfg.bleu_smoothing);
    return result;
}

namespace {

json split_to_json(const SplitMetrics& m) {
    return json{{"count", m.count},
                {"ppl", m.ppl},
                {"bleu", m.bleu},
                {"rouge_l", {{"precision", m.rouge_p}, {"recall", m.rouge_r}, {"f", m.rouge_f}}},
                {"ku2", {{"mean", m.ku2_mean}, {"defined", m.ku2_defined}}},
                {"ku3", {{"mean", m.ku3_mean}, {"defined", m.ku3_defined}}},
                {"qku2",
                 {{"raw_sum", m.qku2.raw_sum},
                  {"mean", m.qku2.mean},
                  {"contributing", m.qku2.contributing},
                  {"skipped", m.qku2.skipped}}},
                {"qku3",
                 {{"raw_sum", m.qku3.raw_sum},
                  {"mean", m.qku3.mean},
                  {"contributing", m.qku3.contributing},
                  {"skipped", m.qku3.skipped}}},
                {"mean_gate", m.mean_gate},
                {"gated", m.gated}};
}

void append_text_row(std::ostream& out, const std::string& name, const SplitMetrics& m) {
    out << std::left << std::setw(9) << name << std::right << std::fixed << std::setprecision(4)
        << std::setw(7) << m.count << std::setw(11) << m.ppl << std::setw(9) << m.bleu
        << std::setw(9) << m.rouge_f << std::setw(9) << m.ku2_mean << std::setw(9) << m.ku3_mean
        << std::setw(9) << m.qku2.mean << std::setw(9) << m.qku3.mean << std::setw(10)
        << m.mean_gate << "\n";
}

} // namespace

void write_eval_report(const std::string& out_dir, const EvalResult& result,
                       const std::vector<DialogueExample>& examples) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);

    json report;
    report["all"] = split_to_json(result.all);
    report["reduced"] = split_to_json(result.reduced);
    report["sampled"] = split_to_json(result.sampled);
    {
        std::ofstream out(dir / "report.json");
        if (!out) throw std::runtime_error("cannot write " + (dir / "report.json").string());
        out << report.dump(2) << "\n";
    }
    {
        std::ofstream out(dir / "report.txt");
        out << std::left << std::setw(9) << "split" << std::right << std::setw(7) << "count"
            << std::setw(11) << "ppl" << std::setw(9) << "bleu" << std::setw(9) << "rouge_f"
            << std::setw(9) << "ku2" << std::setw(9) << "ku3" << std::setw(9) << "qku2"
            << std::setw(9) << "qku3" << std::setw(10) << "gate" << "\n";
        append_text_row(out, "all", result.all);
        append_text_row(out, "reduced", result.reduced);
        append_text_row(out, "sampled", result.sampled);
    }
    {
        std::ofstream out(dir / "per_example.csv");
        out << "index,split,transfer,tokens,nll,gate,ku2,ku3,qku2,qku3,rouge_f,hyp_len\n";
        for (const auto& ee : result.per_example) {
            out << ee.index << ',' << (ee.sampled ? "sampled" : "reduced") << ','
                << (ee.transfer ? 1 : 0) << ',' << ee.tokens << ',' << ee.nll << ',';
            if (ee.gated) out << ee.gate;
            out << ',';
            if (ee.ku2.defined) out << ee.ku2.value;
            out << ',';
            if (ee.ku3.defined) out << ee.ku3.value;
            out << ',';
            if (ee.qku2.contributes) out << ee.qku2.ratio;
            out << ',';
            if (ee.qku3.contributes) out << ee.qku3.ratio;
            out << ',' << ee.rouge.f << ',' << ee.hypothesis.size() << "\n";
        }
    }
    {
        std::ofstream out(dir / "hypotheses.txt");
        for (const auto& ee : result.per_example) out << join(ee.hypothesis) << "\n";
    }
    {
        std::ofstream out(dir / "decoded.jsonl");
        for (const auto& ee : result.per_example) {
            const auto& ex = examples[ee.index];
            json rec;
            rec["document"] = join(ex.document);
            rec["context"] = context_strings(ex);
            rec["last_utterance"] = join(ex.last_utterance);
            rec["reference"] = join(ex.response);
            rec["hypothesis"] = join(ee.hypothesis);
            out << rec.dump() << "\n";
        }
    }
}

SplitMetrics score_eval_records(const std::vector<EvalRecord>& records, bool bleu_smoothing) {
    std::vector<ExampleEval> per;
    std::vector<Tokens> refs;
    for (size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        const auto doc = metric_tokenize(r.document);
        std::vector<Tokens> ctx;
        for (const auto& turn : r.context_turns) ctx.push_back(metric_tokenize(turn));
        ctx.push_back(metric_tokenize(r.last_utterance));
        refs.push_back(metric_tokenize(r.reference));

        ExampleEval ee;
        ee.index = static_cast<int>(i);
        ee.hypothesis = metric_tokenize(r.hypothesis);
        if (!refs.back().empty()) ee.rouge = rouge_l(ee.hypothesis, refs.back());
        const auto t2 = build_triple(doc, ctx, ee.hypothesis, 2);
        const auto t3 = build_triple(doc, ctx, ee.hypothesis, 3);
        ee.ku2 = ku(t2);
        ee.ku3 = ku(t3);
        ee.qku2 = qku_triple(t2);
        ee.qku3 = qku_triple(t3);
        per.push_back(std::move(ee));
    }
    std::vector<int> idx(records.size());
    std::iota(idx.begin(), idx.end(), 0);
    return aggregate_split(per, refs, idx, true, bleu_smoothing);
}

std::vector<GateReportRow> gate_report(const CatModel& model, const Vocab& vocab,
                                       const ModelConfig& cfg,
                                       const std::vector<RawDialogue>& corpus,
                                       const std::vector<int>& rounds_list) {
    if (model.kind != DecoderKind::dd)
        throw std::invalid_argument(
            "gate report needs the concatenation gate; this checkpoint uses the enhanced decoder");
    std::vector<GateReportRow> rows;
    for (int rounds : rounds_list) {
        BuildOptions opt;
        opt.rounds = rounds;
        opt.remove_greetings = cfg.remove_greetings;
        opt.doc_limit = cfg.doc_limit;
        opt.utt_limit = cfg.utt_limit;
        auto examples = build_examples(corpus, opt);

        GateReportRow row;
        row.rounds = rounds;
        row.n = static_cast<long>(examples.size());
        std::vector<double> values;
        for (const auto& ex : examples) {
            auto probe = model.gate_probe(encode_example(ex, vocab));
            values.push_back(probe.value);
            if (probe.flagged) ++row.flagged;
        }
        if (!values.empty()) {
            for (double v : values) row.mean_g += v;
            row.mean_g /= static_cast<double>(values.size());
            for (double v : values) row.std_g += (v - row.mean_g) * (v - row.mean_g);
            row.std_g = std::sqrt(row.std_g / static_cast<double>(values.size()));
        }
        rows.push_back(row);
    }
    return rows;
}

void write_synth_corpus(const std::string& out_dir, std::uint64_t seed, const SynthSizes& sizes,
                        double transfer_fraction) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);

    const std::vector<std::pair<std::string, int>> splits = {
        {"train", sizes.train}, {"dev", sizes.dev}, {"test", sizes.test}};
    std::uint64_t split_seed = seed;
    for (const auto& [name, n] : splits) {
        SynthConfig cfg;
        cfg.seed = split_seed++;
        cfg.n_dialogues = n;
        cfg.transfer_fraction = transfer_fraction;
        save_corpus_jsonl((dir / (name + ".jsonl")).string(), synth_corpus(cfg));
    }

    json manifest;
    manifest["seed"] = seed;
    manifest["sizes"] = {{"train", sizes.train}, {"dev", sizes.dev}, {"test", sizes.test}};
    manifest["transfer_fraction"] = transfer_fraction;
    // one labeled example per dialogue falls out of this preprocessing
    manifest["recommended_build"] = {{"rounds", 2}, {"remove_greetings", 3}};
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
}

} // namespace cat
