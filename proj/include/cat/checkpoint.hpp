#pragma once

#include <cat/config.hpp>
#include <cat/data.hpp>
#include <cat/model.hpp>

#include <string>

namespace cat {

// Self-contained model snapshot: config, vocabulary, every named parameter,
// and (optionally) the Adam moments so training can resume exactly.
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Vocab& vocab,
                     const CatModel& model, AdamStateT<float>* adam = nullptr,
                     int epochs_done = 0);

struct LoadedCheckpoint {
    ModelConfig config;
    Vocab vocab;
    CatModel model;
    AdamStateT<float> adam;
    bool has_adam = false;
    int epochs_done = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

} // namespace cat
