#include <cat/config.hpp>

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cat {

namespace {

using nlohmann::json;

void require_positive(const char* name, double v) {
    if (v <= 0)
        throw std::invalid_argument(std::string("config: ") + name + " must be positive, got " +
                                    std::to_string(v));
}

void require_fraction(const char* name, double v) {
    if (v < 0.0 || v >= 1.0)
        throw std::invalid_argument(std::string("config: ") + name + " must be in [0, 1), got " +
                                    std::to_string(v));
}

} // namespace

void ModelConfig::validate() const {
    require_positive("hidden", hidden);
    require_positive("heads", heads);
    require_positive("layers", layers);
    require_positive("filter", filter);
    if (hidden % heads != 0)
        throw std::invalid_argument("config: hidden (" + std::to_string(hidden) +
                                    ") must be divisible by heads (" + std::to_string(heads) + ")");
    require_fraction("dropout", dropout);
    require_fraction("label_smoothing", label_smoothing);
    if (rounds < 0) throw std::invalid_argument("config: rounds must be >= 0");
    if (remove_greetings < 0) throw std::invalid_argument("config: remove_greetings must be >= 0");
    require_positive("doc_limit", doc_limit);
    require_positive("utt_limit", utt_limit);
    require_positive("vocab_min_freq", vocab_min_freq);
    require_positive("beam", beam);
    require_positive("max_decode_len", max_decode_len);
    if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
    require_positive("batch_size", batch_size);
    require_positive("adam.alpha", adam.alpha);
    require_fraction("adam.beta1", adam.beta1);
    require_fraction("adam.beta2", adam.beta2);
    require_positive("adam.eps", adam.eps);
    if (decoder == DecoderKind::edd && ablation == Ablation::wo_left)
        throw std::invalid_argument(
            "config: the enhanced decoder needs the left encoder branch; decoder=edd cannot be "
            "combined with ablation=wo_left");
    if (decoder == DecoderKind::edd && rounds == 0)
        throw std::invalid_argument(
            "config: decoder=edd needs dialogue history; rounds must be >= 1");
}

ModelConfig config_from_json_string(const std::string& text, const ModelConfig& base) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");

    static const std::set<std::string> known = {
        "hidden",         "heads",          "layers",       "filter",
        "dropout",        "label_smoothing", "decoder",     "ablation",
        "positional_encoding", "rounds",    "remove_greetings", "doc_limit",
        "utt_limit",      "vocab_min_freq", "beam",         "max_decode_len",
        "length_normalize", "bleu_smoothing", "epochs",     "batch_size",
        "seed",           "adam"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw std::invalid_argument("config: unknown key '" + key + "'");

    ModelConfig cfg = base;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("hidden", cfg.hidden);
    get("heads", cfg.heads);
    get("layers", cfg.layers);
    get("filter", cfg.filter);
    get("dropout", cfg.dropout);
    get("label_smoothing", cfg.label_smoothing);
    if (j.contains("decoder")) cfg.decoder = decoder_kind_from_string(j.at("decoder").get<std::string>());
    if (j.contains("ablation")) cfg.ablation = ablation_from_string(j.at("ablation").get<std::string>());
    get("positional_encoding", cfg.positional_encoding);
    get("rounds", cfg.rounds);
    get("remove_greetings", cfg.remove_greetings);
    get("doc_limit", cfg.doc_limit);
    get("utt_limit", cfg.utt_limit);
    get("vocab_min_freq", cfg.vocab_min_freq);
    get("beam", cfg.beam);
    get("max_decode_len", cfg.max_decode_len);
    get("length_normalize", cfg.length_normalize);
    get("bleu_smoothing", cfg.bleu_smoothing);
    get("epochs", cfg.epochs);
    get("batch_size", cfg.batch_size);
    get("seed", cfg.seed);
    if (j.contains("adam")) {
        const auto& a = j.at("adam");
        for (const auto& [key, value] : a.items())
            if (key != "alpha" && key != "beta1" && key != "beta2" && key != "eps")
                throw std::invalid_argument("config: unknown key 'adam." + key + "'");
        if (a.contains("alpha")) cfg.adam.alpha = a.at("alpha").get<double>();
        if (a.contains("beta1")) cfg.adam.beta1 = a.at("beta1").get<double>();
        if (a.contains("beta2")) cfg.adam.beta2 = a.at("beta2").get<double>();
        if (a.contains("eps")) cfg.adam.eps = a.at("eps").get<double>();
    }
    return cfg;
}

std::string config_to_json_string(const ModelConfig& cfg, int indent) {
    json j;
    j["hidden"] = cfg.hidden;
    j["heads"] = cfg.heads;
    j["layers"] = cfg.layers;
    j["filter"] = cfg.filter;
    j["dropout"] = cfg.dropout;
    j["label_smoothing"] = cfg.label_smoothing;
    j["decoder"] = to_string(cfg.decoder);
    j["ablation"] = to_string(cfg.ablation);
    j["positional_encoding"] = cfg.positional_encoding;
    j["rounds"] = cfg.rounds;
    j["remove_greetings"] = cfg.remove_greetings;
    j["doc_limit"] = cfg.doc_limit;
    j["utt_limit"] = cfg.utt_limit;
    j["vocab_min_freq"] = cfg.vocab_min_freq;
    j["beam"] = cfg.beam;
    j["max_decode_len"] = cfg.max_decode_len;
    j["length_normalize"] = cfg.length_normalize;
    j["bleu_smoothing"] = cfg.bleu_smoothing;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["seed"] = cfg.seed;
    j["adam"] = {{"alpha", cfg.adam.alpha},
                 {"beta1", cfg.adam.beta1},
                 {"beta2", cfg.adam.beta2},
                 {"eps", cfg.adam.eps}};
    return j.dump(indent);
}

ModelConfig load_config_file(const std::string& path, const ModelConfig& base) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return config_from_json_string(buf.str(), base);
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

void apply_env_overrides(ModelConfig& cfg) {
    if (const char* seed = std::getenv("CATDG_SEED")) {
        try {
            cfg.seed = std::stoull(seed);
        } catch (const std::exception&) {
            throw std::invalid_argument(std::string("CATDG_SEED is not a number: ") + seed);
        }
    }
}

} // namespace cat
