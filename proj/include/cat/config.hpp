#pragma once

#include <cat/ablation.hpp>
#include <cat/decoders.hpp>
#include <cat/tensor.hpp>

#include <cstdint>
#include <string>

namespace cat {

// Everything a run needs, serializable as JSON. A config file may set any
// subset of keys; unknown keys are rejected so typos fail loudly.
struct ModelConfig {
    // model shape
    int hidden = 300;
    int heads = 6;    // 300 splits into 6 heads of 50; 8 would not divide
    int layers = 3;
    int filter = 2048;
    double dropout = 0.1;
    double label_smoothing = 0.0;
    DecoderKind decoder = DecoderKind::dd;
    Ablation ablation = Ablation::none;
    bool positional_encoding = true;

    // preprocessing
    int rounds = 2;
    int remove_greetings = 2;
    int doc_limit = 800;
    int utt_limit = 40;
    int vocab_min_freq = 2;

    // decoding and metrics
    int beam = 5;
    int max_decode_len = 40;
    bool length_normalize = false;
    bool bleu_smoothing = false;

    // optimization
    int epochs = 30;
    int batch_size = 16;
    std::uint64_t seed = 7;
    AdamConfig adam;

    // Throws std::invalid_argument naming the offending field.
    void validate() const;
};

// JSON round-trip. from-string accepts partial configs layered on top of
// `base`; to-string emits every field.
ModelConfig config_from_json_string(const std::string& text, const ModelConfig& base = {});
std::string config_to_json_string(const ModelConfig& cfg, int indent = -1);

ModelConfig load_config_file(const std::string& path, const ModelConfig& base = {});

// CATDG_SEED, when set, overrides the seed (flags still beat the env var).
void apply_env_overrides(ModelConfig& cfg);

} // namespace cat
