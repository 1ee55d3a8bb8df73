#pragma once

#include <array>
#include <optional>
#include <string_view>

namespace cstalk {

enum class Emotion : int { neutral = 0, angry = 1, sad = 2, surprised = 3, happy = 4, random = 5 };

inline constexpr int kNumEmotions = 5;     // generation targets
inline constexpr int kNumClasses = 6;      // emotions plus the random class

inline constexpr std::array<std::string_view, kNumClasses> kEmotionNames = {
    "neutral", "angry", "sad", "surprised", "happy", "random"};

constexpr int index_of(Emotion e) { return static_cast<int>(e); }

inline std::string_view to_string(Emotion e) { return kEmotionNames[static_cast<std::size_t>(e)]; }

inline std::optional<Emotion> parse_emotion(std::string_view name) {
  for (std::size_t i = 0; i < kEmotionNames.size(); ++i) {
    if (kEmotionNames[i] == name) return static_cast<Emotion>(i);
  }
  return std::nullopt;
}

}  // namespace cstalk
