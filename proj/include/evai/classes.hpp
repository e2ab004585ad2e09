#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace evai {

/// The seven dermatoscopic diagnoses, in catalog order.
inline constexpr std::array<std::string_view, 7> kSkinLesionClasses = {
    "AKIEC", "BCC", "BKL", "DF", "MEL", "NV", "VASC"};

/// The twelve named dermoscopic concepts of the standard CAV bank.
inline constexpr std::array<std::string_view, 12> kDermoscopicConcepts = {
    "Atypical Pigment Network",
    "Typical Pigment Network",
    "Blue Whitish Veil",
    "Irregular Vascular Structures",
    "Regular Vascular Structures",
    "Irregular Pigmentation",
    "Regular Pigmentation",
    "Irregular Streaks",
    "Regular Streaks",
    "Regression Structures",
    "Irregular Dots and Globules",
    "Regular Dots and Globules"};

inline std::vector<std::string> skin_lesion_classes() {
    return {kSkinLesionClasses.begin(), kSkinLesionClasses.end()};
}

inline std::vector<std::string> dermoscopic_concepts() {
    return {kDermoscopicConcepts.begin(), kDermoscopicConcepts.end()};
}

}  // namespace evai
