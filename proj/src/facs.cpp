#include "tbd/facs.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <set>

namespace tbd::facs {

using nlohmann::json;

namespace {

constexpr std::string_view kDegree = "{degree}";

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw FacsError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw FacsError(where + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace

const std::string& IntensityLevel::modifier_for(int au_id) const {
  auto it = amplitude_modifiers.find(au_id);
  return it == amplitude_modifiers.end() ? default_modifier : it->second;
}

void to_json(json& j, const ActionUnit& au) {
  j = json{{"id", au.id}, {"name", au.name}, {"muscles", au.muscles},
           {"movement_text", au.movement_text}};
}

void from_json(const json& j, ActionUnit& au) {
  const std::string where = "action unit";
  au.id = field<int>(j, "id", where);
  au.name = field<std::string>(j, "name", where);
  au.muscles = field<std::vector<std::string>>(j, "muscles", where);
  au.movement_text = field<std::string>(j, "movement_text", where);
}

void to_json(json& j, const EmotionProfile& p) {
  j = json{{"label", p.label}, {"au_ids", p.au_ids}, {"core_muscles", p.core_muscles}};
}

void from_json(const json& j, EmotionProfile& p) {
  const std::string where = "emotion profile";
  p.label = field<std::string>(j, "label", where);
  p.au_ids = field<std::vector<int>>(j, "au_ids", where);
  p.core_muscles = j.contains("core_muscles") ? field<std::vector<std::string>>(j, "core_muscles", where)
                                              : std::vector<std::string>{};
}

const std::vector<std::string>& emotion_labels() {
  static const std::vector<std::string> labels{"neutral", "happy",   "sad",      "angry",
                                               "fear",    "disgust", "surprise", "contempt"};
  return labels;
}

bool is_emotion_label(std::string_view label) {
  const auto& l = emotion_labels();
  return std::find(l.begin(), l.end(), label) != l.end();
}

KnowledgeBase KnowledgeBase::from_json(const json& doc) {
  if (!doc.is_object()) throw FacsError("knowledge file must be a JSON object");
  if (field<std::string>(doc, "format", "knowledge file") != "tbd-facs-knowledge") {
    throw FacsError("knowledge file: unexpected format tag");
  }
  KnowledgeBase kb;
  kb.muscles_ = field<std::map<std::string, std::string>>(doc, "muscles", "knowledge file");

  std::set<int> ids;
  for (const auto& j : field<json>(doc, "action_units", "knowledge file")) {
    ActionUnit au = j.get<ActionUnit>();
    const std::string where = "AU" + std::to_string(au.id);
    if (!ids.insert(au.id).second) throw FacsError(where + ": duplicate id");
    if (au.name.empty()) throw FacsError(where + ": empty name");
    if (au.muscles.empty()) throw FacsError(where + ": no muscles listed");
    if (au.movement_text.find(kDegree) == std::string::npos) {
      throw FacsError(where + ": movement_text lacks the {degree} placeholder");
    }
    for (const auto& m : au.muscles) {
      if (!kb.muscles_.count(m)) throw FacsError(where + ": muscle '" + m + "' not in glossary");
    }
    kb.aus_.push_back(std::move(au));
  }

  std::set<std::string> seen;
  for (const auto& j : field<json>(doc, "emotions", "knowledge file")) {
    EmotionProfile p = j.get<EmotionProfile>();
    if (!is_emotion_label(p.label)) throw FacsError("unknown emotion label '" + p.label + "'");
    if (!seen.insert(p.label).second) throw FacsError("duplicate emotion '" + p.label + "'");
    if (p.label == "neutral" && !p.au_ids.empty()) throw FacsError("neutral must list no AUs");
    p.core_muscles.clear();
    for (int id : p.au_ids) {
      if (!ids.count(id)) {
        throw FacsError("emotion '" + p.label + "' references unknown AU" + std::to_string(id));
      }
      for (const auto& m : kb.action_unit(id).muscles) {
        if (std::find(p.core_muscles.begin(), p.core_muscles.end(), m) == p.core_muscles.end()) {
          p.core_muscles.push_back(m);
        }
      }
    }
    kb.emotions_.push_back(std::move(p));
  }
  if (seen.size() != emotion_labels().size()) {
    throw FacsError("knowledge file must define all " + std::to_string(emotion_labels().size()) +
                    " emotions");
  }

  std::set<std::string> adjectives;
  for (const auto& j : field<json>(doc, "intensities", "knowledge file")) {
    IntensityLevel lvl;
    const std::string where = "intensity";
    lvl.level = field<int>(j, "level", where);
    lvl.adjective = field<std::string>(j, "adjective", where);
    lvl.default_modifier = field<std::string>(j, "default_modifier", where);
    if (j.contains("amplitude_modifiers")) {
      for (const auto& [k, v] : j.at("amplitude_modifiers").items()) {
        int id = 0;
        try {
          id = std::stoi(k);
        } catch (const std::exception&) {
          throw FacsError("intensity " + std::to_string(lvl.level) + ": bad AU key '" + k + "'");
        }
        if (!ids.count(id)) throw FacsError("intensity modifier for unknown AU" + k);
        lvl.amplitude_modifiers[id] = v.get<std::string>();
      }
    }
    if (lvl.adjective.empty() || !adjectives.insert(lvl.adjective).second) {
      throw FacsError("intensity adjectives must be non-empty and distinct");
    }
    kb.intensities_.push_back(std::move(lvl));
  }
  std::sort(kb.intensities_.begin(), kb.intensities_.end(),
            [](const auto& a, const auto& b) { return a.level < b.level; });
  if (kb.intensities_.size() != 3) throw FacsError("expected exactly three intensity levels");
  for (int i = 0; i < 3; ++i) {
    if (kb.intensities_[i].level != i + 1) throw FacsError("intensity levels must be 1, 2 and 3");
  }
  return kb;
}

KnowledgeBase KnowledgeBase::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FacsError("cannot open knowledge file " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FacsError(path + ": " + e.what());
  }
  return from_json(doc);
}

const KnowledgeBase& KnowledgeBase::builtin() {
  static const KnowledgeBase kb = load(default_knowledge_path());
  return kb;
}

const EmotionProfile& KnowledgeBase::lookup_emotion(std::string_view label) const {
  for (const auto& p : emotions_) {
    if (p.label == label) return p;
  }
  throw FacsError("unknown emotion label '" + std::string(label) + "'");
}

const ActionUnit& KnowledgeBase::action_unit(int id) const {
  for (const auto& au : aus_) {
    if (au.id == id) return au;
  }
  throw FacsError("unknown action unit AU" + std::to_string(id));
}

const IntensityLevel& KnowledgeBase::intensity(int level) const {
  if (level < 1 || level > static_cast<int>(intensities_.size())) {
    throw FacsError("intensity level " + std::to_string(level) + " outside 1..3");
  }
  return intensities_[static_cast<std::size_t>(level - 1)];
}

std::string KnowledgeBase::describe_au(int id, int level) const {
  const ActionUnit& au = action_unit(id);
  const IntensityLevel& lvl = intensity(level);
  std::string movement = au.movement_text;
  movement.replace(movement.find(kDegree), kDegree.size(), lvl.modifier_for(id));
  return lvl.adjective + " " + lower(au.name) + " (AU" + std::to_string(id) + "): " + movement;
}

std::string default_knowledge_path() {
  if (const char* dir = std::getenv("TBD_DATA_DIR")) return std::string(dir) + "/facs_knowledge.json";
  return std::string(TBD_DATA_DIR) + "/facs_knowledge.json";
}

}  // namespace tbd::facs
