#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tbd/tensor.hpp"

// FACS reference data: action units, emotion prototypes and intensity wording.
namespace tbd::facs {

struct FacsError : Error {
  using Error::Error;
};

struct ActionUnit {
  int id = 0;
  std::string name;
  std::vector<std::string> muscles;
  std::string movement_text;  // contains the {degree} placeholder

  bool operator==(const ActionUnit&) const = default;
};

struct EmotionProfile {
  std::string label;
  std::vector<int> au_ids;
  std::vector<std::string> core_muscles;

  bool operator==(const EmotionProfile&) const = default;
};

struct IntensityLevel {
  int level = 1;
  std::string adjective;
  std::string default_modifier;
  std::map<int, std::string> amplitude_modifiers;

  const std::string& modifier_for(int au_id) const;
  bool operator==(const IntensityLevel&) const = default;
};

void to_json(nlohmann::json& j, const ActionUnit& au);
void from_json(const nlohmann::json& j, ActionUnit& au);
void to_json(nlohmann::json& j, const EmotionProfile& p);
void from_json(const nlohmann::json& j, EmotionProfile& p);

/// The eight supported labels, in catalog order.
const std::vector<std::string>& emotion_labels();
bool is_emotion_label(std::string_view label);

class KnowledgeBase {
 public:
  /// Parses and validates; throws FacsError naming the first problem.
  static KnowledgeBase from_json(const nlohmann::json& doc);
  static KnowledgeBase load(const std::string& path);
  /// The data file shipped with the repository.
  static const KnowledgeBase& builtin();

  const EmotionProfile& lookup_emotion(std::string_view label) const;
  const ActionUnit& action_unit(int id) const;
  const IntensityLevel& intensity(int level) const;
  /// "<Adjective> <au name> (AU<id>): <movement text>".
  std::string describe_au(int id, int level) const;

  const std::vector<ActionUnit>& action_units() const { return aus_; }
  const std::vector<EmotionProfile>& emotions() const { return emotions_; }
  const std::map<std::string, std::string>& muscles() const { return muscles_; }

 private:
  std::vector<ActionUnit> aus_;
  std::vector<EmotionProfile> emotions_;
  std::vector<IntensityLevel> intensities_;
  std::map<std::string, std::string> muscles_;
};

/// Path of the shipped knowledge file.
std::string default_knowledge_path();

}  // namespace tbd::facs
