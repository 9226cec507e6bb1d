#pragma once

#include <stdexcept>
#include <string>

namespace cat {

// Model variants studied alongside the full model:
//   wo_left - drop the history branch entirely (last utterance + document only)
//   wo_56   - keep both branches but skip the relevance gate (plain concat)
//   wo_G    - keep the history branch but remove the guiding stage; the left
//             branch takes the right branch's structure with history as input
enum class Ablation { none, wo_left, wo_56, wo_G };

inline std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::none: return "none";
        case Ablation::wo_left: return "wo_left";
        case Ablation::wo_56: return "wo_56";
        case Ablation::wo_G: return "wo_G";
    }
    return "none";
}

inline Ablation ablation_from_string(const std::string& s) {
    if (s == "none") return Ablation::none;
    if (s == "wo_left") return Ablation::wo_left;
    if (s == "wo_56") return Ablation::wo_56;
    if (s == "wo_G") return Ablation::wo_G;
    throw std::invalid_argument("unknown ablation '" + s + "' (expected none|wo_left|wo_56|wo_G)");
}

}  // namespace cat
