#include <CLI11.hpp>

#include <cat/checkpoint.hpp>
#include <cat/pipeline.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace {

namespace fs = std::filesystem;

// Model/run settings resolve in layers: built-in defaults, then the config
// file, then CATDG_SEED, then explicit flags.
struct ConfigOpts {
    std::string config_path;
    cat::ModelConfig flags;
    std::string decoder_str, ablation_str;
    std::map<std::string, CLI::Option*> opt;

    void attach(CLI::App* cmd, bool with_rounds = true) {
        cmd->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
        opt["hidden"] = cmd->add_option("--hidden", flags.hidden, "model width");
        opt["heads"] = cmd->add_option("--heads", flags.heads, "attention heads");
        opt["layers"] = cmd->add_option("--layers", flags.layers, "encoder/decoder layers");
        opt["filter"] = cmd->add_option("--filter", flags.filter, "feed-forward inner width");
        opt["dropout"] = cmd->add_option("--dropout", flags.dropout, "dropout rate");
        opt["label_smoothing"] =
            cmd->add_option("--label-smoothing", flags.label_smoothing, "label smoothing mass");
        opt["decoder"] = cmd->add_option("--decoder", decoder_str, "dd | edd");
        opt["ablation"] =
            cmd->add_option("--ablation", ablation_str, "none | wo_left | wo_56 | wo_G");
        opt["positional_encoding"] = cmd->add_flag("--positional-encoding,!--no-positional-encoding",
                                                   flags.positional_encoding,
                                                   "add sinusoidal positions to embeddings");
        opt["rounds"] = with_rounds
                            ? cmd->add_option("--rounds", flags.rounds, "history rounds per example")
                            : nullptr;
        opt["remove_greetings"] = cmd->add_option("--remove-greetings", flags.remove_greetings,
                                                  "greeting targets to skip per dialogue");
        opt["doc_limit"] = cmd->add_option("--doc-limit", flags.doc_limit, "document token cap");
        opt["utt_limit"] = cmd->add_option("--utt-limit", flags.utt_limit, "utterance token cap");
        opt["vocab_min_freq"] = cmd->add_option("--vocab-min-freq", flags.vocab_min_freq,
                                                "minimum token frequency kept in the vocabulary");
        opt["beam"] = cmd->add_option("--beam", flags.beam, "beam width");
        opt["max_decode_len"] =
            cmd->add_option("--max-decode-len", flags.max_decode_len, "generation length cap");
        opt["length_normalize"] = cmd->add_flag("--length-normalize,!--no-length-normalize",
                                                flags.length_normalize,
                                                "rank beam hypotheses by per-token log-probability");
        opt["bleu_smoothing"] =
            cmd->add_flag("--bleu-smoothing,!--no-bleu-smoothing", flags.bleu_smoothing,
                          "add-one smoothing for zero higher-order BLEU counts");
        opt["epochs"] = cmd->add_option("--epochs", flags.epochs, "training epochs");
        opt["batch_size"] = cmd->add_option("--batch-size", flags.batch_size, "examples per update");
        opt["seed"] = cmd->add_option("--seed", flags.seed, "run seed");
        opt["alpha"] = cmd->add_option("--adam-alpha", flags.adam.alpha, "Adam learning rate");
        opt["beta1"] = cmd->add_option("--adam-beta1", flags.adam.beta1, "Adam beta1");
        opt["beta2"] = cmd->add_option("--adam-beta2", flags.adam.beta2, "Adam beta2");
        opt["eps"] = cmd->add_option("--adam-eps", flags.adam.eps, "Adam epsilon");
    }

    cat::ModelConfig resolve(const cat::ModelConfig& base = {}) const {
        cat::ModelConfig cfg = base;
        if (!config_path.empty()) cfg = cat::load_config_file(config_path, cfg);
        cat::apply_env_overrides(cfg);
        auto passed = [&](const char* name) {
            auto* o = opt.at(name);
            return o != nullptr && o->count() > 0;
        };
        if (passed("hidden")) cfg.hidden = flags.hidden;
        if (passed("heads")) cfg.heads = flags.heads;
        if (passed("layers")) cfg.layers = flags.layers;
        if (passed("filter")) cfg.filter = flags.filter;
        if (passed("dropout")) cfg.dropout = flags.dropout;
        if (passed("label_smoothing")) cfg.label_smoothing = flags.label_smoothing;
        if (passed("decoder")) cfg.decoder = cat::decoder_kind_from_string(decoder_str);
        if (passed("ablation")) cfg.ablation = cat::ablation_from_string(ablation_str);
        if (passed("positional_encoding")) cfg.positional_encoding = flags.positional_encoding;
        if (passed("rounds")) cfg.rounds = flags.rounds;
        if (passed("remove_greetings")) cfg.remove_greetings = flags.remove_greetings;
        if (passed("doc_limit")) cfg.doc_limit = flags.doc_limit;
        if (passed("utt_limit")) cfg.utt_limit = flags.utt_limit;
        if (passed("vocab_min_freq")) cfg.vocab_min_freq = flags.vocab_min_freq;
        if (passed("beam")) cfg.beam = flags.beam;
        if (passed("max_decode_len")) cfg.max_decode_len = flags.max_decode_len;
        if (passed("length_normalize")) cfg.length_normalize = flags.length_normalize;
        if (passed("bleu_smoothing")) cfg.bleu_smoothing = flags.bleu_smoothing;
        if (passed("epochs")) cfg.epochs = flags.epochs;
        if (passed("batch_size")) cfg.batch_size = flags.batch_size;
        if (passed("seed")) cfg.seed = flags.seed;
        if (passed("alpha")) cfg.adam.alpha = flags.adam.alpha;
        if (passed("beta1")) cfg.adam.beta1 = flags.adam.beta1;
        if (passed("beta2")) cfg.adam.beta2 = flags.adam.beta2;
        if (passed("eps")) cfg.adam.eps = flags.adam.eps;
        cfg.validate();
        return cfg;
    }
};

cat::BuildOptions build_options(const cat::ModelConfig& cfg) {
    cat::BuildOptions opt;
    opt.rounds = cfg.rounds;
    opt.remove_greetings = cfg.remove_greetings;
    opt.doc_limit = cfg.doc_limit;
    opt.utt_limit = cfg.utt_limit;
    return opt;
}

int cmd_train(const ConfigOpts& copts, const std::string& corpus_path, const std::string& dev_path,
              const std::string& out_dir, const std::string& resume_path) {
    cat::ModelConfig cfg;
    cat::LoadedCheckpoint resumed;
    const bool resuming = !resume_path.empty();
    if (resuming) {
        resumed = cat::load_checkpoint(resume_path);
        cfg = copts.resolve(resumed.config);
    } else {
        cfg = copts.resolve();
    }

    auto corpus = cat::load_corpus_jsonl(corpus_path);
    std::vector<cat::RawDialogue> dev_corpus;
    if (!dev_path.empty()) dev_corpus = cat::load_corpus_jsonl(dev_path);
    auto data = cat::prepare_training_data(corpus, dev_path.empty() ? nullptr : &dev_corpus, cfg,
                                           resuming ? &resumed.vocab : nullptr);

    fs::create_directories(out_dir);
    const fs::path dir(out_dir);
    std::ofstream log_file(dir / "train_log.jsonl", resuming ? std::ios::app : std::ios::out);

    std::cout << "training on " << data.train.size() << " examples (" << data.dev.size()
              << " held out), vocabulary " << data.vocab.size() << "\n";

    double best_dev = std::numeric_limits<double>::infinity();
    auto on_epoch = [&](const cat::EpochLog& log, const cat::CatModel& model,
                        cat::AdamStateT<float>& adam) {
        std::cout << "epoch " << log.epoch << ": pass1 " << log.pass1_mean << " pass2 "
                  << log.pass2_mean << " total " << log.total_mean << " dev " << log.dev_mean
                  << " (" << log.seconds << "s)\n";
        log_file << "{\"epoch\":" << log.epoch << ",\"pass1\":" << log.pass1_mean
                 << ",\"pass2\":" << log.pass2_mean << ",\"total\":" << log.total_mean
                 << ",\"dev\":" << log.dev_mean << ",\"seconds\":" << log.seconds << "}\n";
        log_file.flush();
        cat::save_checkpoint((dir / "last.ckpt").string(), cfg, data.vocab, model, &adam,
                             log.epoch);
        if (log.dev_mean < best_dev) {
            best_dev = log.dev_mean;
            cat::save_checkpoint((dir / "best.ckpt").string(), cfg, data.vocab, model, &adam,
                                 log.epoch);
        }
    };

    cat::TrainResult result;
    if (resuming) {
        const int extra = std::max(0, cfg.epochs - resumed.epochs_done);
        std::cout << "resuming from " << resume_path << " after " << resumed.epochs_done
                  << " epochs; " << extra << " to go\n";
        result = cat::resume_training(cfg, data, std::move(resumed.model), std::move(resumed.adam),
                                      resumed.epochs_done, extra, on_epoch);
    } else {
        result = cat::train_model(cfg, data, on_epoch);
    }

    if (result.log.empty())
        std::cout << "nothing to train (epoch budget already reached)\n";
    else
        std::cout << "done; best dev loss at epoch " << result.best_epoch << "\n";
    if (!fs::exists(dir / "last.ckpt"))
        cat::save_checkpoint((dir / "last.ckpt").string(), cfg, data.vocab, result.model,
                             &result.adam, resuming ? resumed.epochs_done : 0);
    return 0;
}

int cmd_eval(const ConfigOpts& copts, const std::string& ckpt_path, const std::string& corpus_path,
             const std::string& out_dir, const std::string& split_filter) {
    auto loaded = cat::load_checkpoint(ckpt_path);
    const auto cfg = copts.resolve(loaded.config);
    auto corpus = cat::load_corpus_jsonl(corpus_path);
    auto examples = cat::build_examples(corpus, build_options(cfg));
    if (examples.empty()) throw std::runtime_error("evaluation corpus produced no examples");

    auto result = cat::evaluate_model(loaded.model, loaded.vocab, cfg, examples);
    cat::write_eval_report(out_dir, result, examples);

    std::ifstream report(fs::path(out_dir) / "report.txt");
    std::cout << report.rdbuf();
    auto pick = [&]() -> const cat::SplitMetrics& {
        if (split_filter == "reduced") return result.reduced;
        if (split_filter == "sampled") return result.sampled;
        return result.all;
    }();
    std::cout << "[" << split_filter << "] ppl " << pick.ppl << " bleu " << pick.bleu
              << " rouge_f " << pick.rouge_f << "\n";
    return 0;
}

int cmd_generate(const ConfigOpts& copts, const std::string& ckpt_path,
                 const std::string& corpus_path, const std::string& out_dir) {
    auto loaded = cat::load_checkpoint(ckpt_path);
    const auto cfg = copts.resolve(loaded.config);
    auto corpus = cat::load_corpus_jsonl(corpus_path);
    auto examples = cat::build_examples(corpus, build_options(cfg));
    if (examples.empty()) throw std::runtime_error("corpus produced no examples");

    auto result = cat::evaluate_model(loaded.model, loaded.vocab, cfg, examples);
    cat::write_eval_report(out_dir, result, examples);
    std::cout << "decoded " << examples.size() << " examples into " << out_dir << "\n";
    return 0;
}

int cmd_gate_report(const ConfigOpts& copts, const std::string& ckpt_path,
                    const std::string& corpus_path, const std::string& rounds_csv,
                    const std::string& out_path) {
    auto loaded = cat::load_checkpoint(ckpt_path);
    const auto cfg = copts.resolve(loaded.config);
    auto corpus = cat::load_corpus_jsonl(corpus_path);

    std::vector<int> rounds;
    std::stringstream ss(rounds_csv);
    std::string part;
    while (std::getline(ss, part, ','))
        if (!part.empty()) rounds.push_back(std::stoi(part));
    if (rounds.empty()) throw std::invalid_argument("gate-report: empty rounds list");

    auto rows = cat::gate_report(loaded.model, loaded.vocab, cfg, corpus, rounds);

    std::ostringstream csv;
    csv << "rounds,n,mean_g,std_g,flagged\n";
    for (const auto& r : rows)
        csv << r.rounds << ',' << r.n << ',' << r.mean_g << ',' << r.std_g << ',' << r.flagged
            << "\n";
    if (out_path.empty() || out_path == "-") {
        std::cout << csv.str();
    } else {
        std::ofstream out(out_path);
        if (!out) throw std::runtime_error("cannot write " + out_path);
        out << csv.str();
        std::cout << "wrote " << rows.size() << " rows to " << out_path << "\n";
    }
    return 0;
}

int cmd_synth(const std::string& out_dir, std::uint64_t seed, int n_train, int n_dev, int n_test,
              double transfer_fraction) {
    cat::SynthSizes sizes{n_train, n_dev, n_test};
    cat::write_synth_corpus(out_dir, seed, sizes, transfer_fraction);
    std::cout << "wrote train/dev/test.jsonl + manifest.json to " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"compare-aggregate transformer for document-grounded dialogue"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "train a model");
    ConfigOpts train_opts;
    std::string train_corpus, train_dev, train_out, train_resume;
    train->add_option("--corpus", train_corpus, "training corpus (JSONL)")
        ->required()
        ->check(CLI::ExistingFile);
    train->add_option("--dev", train_dev, "held-out corpus (JSONL)")->check(CLI::ExistingFile);
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--resume", train_resume, "checkpoint to continue from")
        ->check(CLI::ExistingFile);
    train_opts.attach(train);

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    ConfigOpts eval_opts;
    std::string eval_ckpt, eval_corpus, eval_out, eval_split = "all";
    eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    eval->add_option("--corpus", eval_corpus, "test corpus (JSONL)")
        ->required()
        ->check(CLI::ExistingFile);
    eval->add_option("--out", eval_out, "report directory")->required();
    eval->add_option("--split", eval_split, "summary split: all | reduced | sampled")
        ->check(CLI::IsMember({"all", "reduced", "sampled"}));
    eval_opts.attach(eval);

    // generate
    auto* gen = app.add_subcommand("generate", "decode hypotheses for a corpus");
    ConfigOpts gen_opts;
    std::string gen_ckpt, gen_corpus, gen_out;
    gen->add_option("--checkpoint", gen_ckpt, "model checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    gen->add_option("--corpus", gen_corpus, "corpus (JSONL)")->required()->check(CLI::ExistingFile);
    gen->add_option("--out", gen_out, "output directory")->required();
    gen_opts.attach(gen);

    // gate-report
    auto* gate = app.add_subcommand("gate-report", "per-rounds relevance gate statistics");
    ConfigOpts gate_opts;
    std::string gate_ckpt, gate_corpus, gate_rounds = "0,1,2,3", gate_out;
    gate->add_option("--checkpoint", gate_ckpt, "model checkpoint")
        ->required()
        ->check(CLI::ExistingFile);
    gate->add_option("--corpus", gate_corpus, "corpus (JSONL)")
        ->required()
        ->check(CLI::ExistingFile);
    gate->add_option("--rounds", gate_rounds, "comma-separated history-round settings");
    gate->add_option("--out", gate_out, "CSV path (default: stdout)");
    gate_opts.attach(gate, /*with_rounds=*/false);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic topic-transfer corpus");
    std::string synth_out;
    std::uint64_t synth_seed = 7;
    int synth_train = 1000, synth_dev = 100, synth_test = 100;
    double synth_fraction = 0.5;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--seed", synth_seed, "generation seed");
    synth->add_option("--train", synth_train, "training dialogues");
    synth->add_option("--dev", synth_dev, "dev dialogues");
    synth->add_option("--test", synth_test, "test dialogues");
    synth->add_option("--transfer-fraction", synth_fraction,
                      "fraction of dialogues that switch document sections");

    try {
        app.parse(argc, argv);
        if (train->parsed())
            return cmd_train(train_opts, train_corpus, train_dev, train_out, train_resume);
        if (eval->parsed()) return cmd_eval(eval_opts, eval_ckpt, eval_corpus, eval_out, eval_split);
        if (gen->parsed()) return cmd_generate(gen_opts, gen_ckpt, gen_corpus, gen_out);
        if (gate->parsed())
            return cmd_gate_report(gate_opts, gate_ckpt, gate_corpus, gate_rounds, gate_out);
        if (synth->parsed())
            return cmd_synth(synth_out, synth_seed, synth_train, synth_dev, synth_test,
                             synth_fraction);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
