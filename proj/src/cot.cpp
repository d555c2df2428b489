#include "tbd/cot.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace tbd::cot {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool contains_ci(const std::string& haystack, const std::string& needle) {
  return lower(haystack).find(lower(needle)) != std::string::npos;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CotError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Value of the first line "key: value" (key case-insensitive), or empty.
std::string line_value(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.size() > key.size() && lower(t.substr(0, key.size() + 1)) == key + ":") {
      return trim(t.substr(key.size() + 1));
    }
  }
  return {};
}

SubjectAttributes parse_subject(const std::string& reply) {
  SubjectAttributes s;
  auto set = [&](std::string& field, const char* key) {
    const std::string v = line_value(reply, key);
    if (!v.empty()) field = v;
  };
  set(s.age_range, "age_range");
  set(s.gender, "gender");
  set(s.ethnicity, "ethnicity");
  set(s.appearance_notes, "appearance");
  return s;
}

std::string subject_phrase(const SubjectAttributes& s) {
  std::string words;
  for (const auto* f : {&s.age_range, &s.ethnicity, &s.gender}) {
    if (*f != "unspecified") words += (words.empty() ? "" : " ") + *f;
  }
  if (words.empty()) return "A person";
  const bool vowel = std::string("aeiouAEIOU").find(words.front()) != std::string::npos;
  std::string out = (vowel ? "An " : "A ") + words;
  if (s.gender == "unspecified") out += " person";
  return out;
}

struct Sections {
  std::string coarse;
  std::string fine;
};

Sections parse_sections(const std::string& reply) {
  const auto c = reply.find("COARSE:");
  const auto f = reply.find("FINE:");
  if (c == std::string::npos || f == std::string::npos) {
    throw CotError("prompt design reply must contain COARSE: and FINE: sections");
  }
  Sections s;
  if (c < f) {
    s.coarse = trim(reply.substr(c + 7, f - c - 7));
    s.fine = trim(reply.substr(f + 5));
  } else {
    s.fine = trim(reply.substr(f + 5, c - f - 5));
    s.coarse = trim(reply.substr(c + 7));
  }
  return s;
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

std::string au_catalog_text(const facs::KnowledgeBase& kb) {
  std::vector<std::string> lines;
  for (const auto& au : kb.action_units()) lines.push_back("AU" + std::to_string(au.id) + " " + au.name);
  return join_lines(lines);
}

// Deterministic replies standing in for the model in the rules backend.
struct RuleReplies {
  const facs::KnowledgeBase& kb;
  const facs::EmotionProfile& profile;
  int intensity;

  std::string step2() const {
    if (profile.au_ids.empty()) return "none\nrationale: a neutral face activates no action units\n";
    std::vector<std::string> lines;
    for (int id : profile.au_ids) {
      lines.push_back("AU" + std::to_string(id) + " " + kb.action_unit(id).name);
    }
    lines.push_back("rationale: prototype action units for " + profile.label +
                    " in the knowledge base");
    return join_lines(lines);
  }

  std::string step3() const {
    if (profile.au_ids.empty()) return "none\nrationale: facial muscles stay at rest\n";
    std::vector<std::string> lines;
    for (int id : profile.au_ids) lines.push_back(kb.describe_au(id, intensity));
    lines.push_back("rationale: muscle actions scaled to intensity level " +
                    std::to_string(intensity));
    return join_lines(lines);
  }

  std::string step4(const SubjectAttributes& subject) const {
    const std::string adjective = kb.intensity(intensity).adjective;
    const std::string adj = lower(adjective);
    const std::string article = std::string("aeiou").find(adj.front()) == std::string::npos ? "a" : "an";
    const std::string coarse = subject_phrase(subject) + " speaking with " + article + " " + adj +
                               " " + profile.label + " expression.";
    std::string fine;
    if (profile.au_ids.empty()) {
      fine = adjective + " neutral expression with " + kNoActivationPhrase +
             " activation; the face stays relaxed and only the speech movements of the lips and "
             "jaw are visible.";
    } else {
      fine = adjective + " " + profile.label + " expression built from";
      for (std::size_t i = 0; i < profile.au_ids.size(); ++i) {
        const auto& au = kb.action_unit(profile.au_ids[i]);
        fine += (i == 0 ? " " : ", ") + lower(au.name) + " (AU" + std::to_string(au.id) + ")";
      }
      fine += ".";
      for (int id : profile.au_ids) fine += " " + kb.describe_au(id, intensity) + ".";
      fine += " Core muscles:";
      for (std::size_t i = 0; i < profile.core_muscles.size(); ++i) {
        fine += (i == 0 ? " " : ", ") + profile.core_muscles[i];
      }
      fine += ".";
    }
    return "COARSE: " + coarse + "\nFINE: " + fine + "\n";
  }
};

}  // namespace

SubjectAttributes load_subject_sidecar(const std::string& image_path) {
  SubjectAttributes s;
  if (image_path.empty()) return s;
  const std::string path = image_path + ".subject.json";
  if (!fs::exists(path)) return s;
  try {
    return json::parse(read_file(path)).get<SubjectAttributes>();
  } catch (const json::exception& e) {
    throw CotError(path + ": " + e.what());
  }
}

bool CoTTrace::operator==(const CoTTrace& o) const {
  return json(*this) == json(o);
}

bool PromptBundle::operator==(const PromptBundle& o) const {
  return json(*this) == json(o);
}

void to_json(json& j, const SubjectAttributes& s) {
  j = json{{"age_range", s.age_range},
           {"gender", s.gender},
           {"ethnicity", s.ethnicity},
           {"appearance_notes", s.appearance_notes}};
}

void from_json(const json& j, SubjectAttributes& s) {
  s = SubjectAttributes{};
  s.age_range = j.value("age_range", s.age_range);
  s.gender = j.value("gender", s.gender);
  s.ethnicity = j.value("ethnicity", s.ethnicity);
  s.appearance_notes = j.value("appearance_notes", s.appearance_notes);
}

void to_json(json& j, const CoTTrace& t) {
  json steps = json::array();
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    steps.push_back({{"step", i + 1},
                     {"request", t.steps[i].request},
                     {"response", t.steps[i].response},
                     {"timestamp_ms", t.steps[i].timestamp_ms}});
  }
  j = json{{"backend", t.backend},
           {"step1_subject", t.step1_subject},
           {"step2_aus", t.step2_aus},
           {"step2_rationale", t.step2_rationale},
           {"step3_muscles", t.step3_muscles},
           {"step3_rationale", t.step3_rationale},
           {"step4_raw", t.step4_raw},
           {"steps", steps}};
}

void from_json(const json& j, CoTTrace& t) {
  t.backend = j.at("backend").get<std::string>();
  t.step1_subject = j.at("step1_subject").get<SubjectAttributes>();
  t.step2_aus = j.at("step2_aus").get<std::vector<int>>();
  t.step2_rationale = j.at("step2_rationale").get<std::string>();
  t.step3_muscles = j.at("step3_muscles").get<std::vector<std::string>>();
  t.step3_rationale = j.at("step3_rationale").get<std::string>();
  t.step4_raw = j.at("step4_raw").get<std::string>();
  t.steps.clear();
  for (const auto& s : j.at("steps")) {
    t.steps.push_back({s.at("request").get<std::string>(), s.at("response").get<std::string>(),
                       s.at("timestamp_ms").get<long long>()});
  }
}

void to_json(json& j, const PromptBundle& b) {
  j = json{{"coarse_text", b.coarse_text},
           {"fine_text", b.fine_text},
           {"emotion", b.emotion},
           {"intensity", b.intensity},
           {"trace", b.trace}};
}

void from_json(const json& j, PromptBundle& b) {
  b.coarse_text = j.at("coarse_text").get<std::string>();
  b.fine_text = j.at("fine_text").get<std::string>();
  b.emotion = j.at("emotion").get<std::string>();
  b.intensity = j.at("intensity").get<int>();
  b.trace = j.at("trace").get<CoTTrace>();
}

std::string bundle_filename(const std::string& clip_id) { return clip_id + ".prompt.json"; }

void save_bundle(const PromptBundle& bundle, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CotError("cannot write " + path);
  out << json(bundle).dump(2) << "\n";
  if (!out) throw CotError("write failed for " + path);
}

PromptBundle load_bundle(const std::string& path) {
  try {
    return json::parse(read_file(path)).get<PromptBundle>();
  } catch (const json::exception& e) {
    throw CotError(path + ": " + e.what());
  }
}

bool ValidationReport::has(const std::string& r) const {
  return std::any_of(violations.begin(), violations.end(),
                     [&](const Violation& v) { return v.rule == r; });
}

std::string ValidationReport::summary() const {
  std::string s;
  for (const auto& v : violations) s += (s.empty() ? "" : "; ") + v.rule + ": " + v.detail;
  return s;
}

std::vector<int> mentioned_aus(const std::string& text, const facs::KnowledgeBase& kb) {
  std::vector<int> ids;
  const std::string t = lower(text);
  for (const auto& au : kb.action_units()) {
    if (t.find(lower(au.name)) != std::string::npos) ids.push_back(au.id);
  }
  return ids;
}

std::vector<std::string> mentioned_muscles(const std::string& text, const facs::KnowledgeBase& kb) {
  std::vector<std::string> out;
  const std::string t = lower(text);
  for (const auto& [name, gloss] : kb.muscles()) {
    if (t.find(lower(name)) != std::string::npos) out.push_back(name);
  }
  return out;
}

ValidationReport validate_bundle(const PromptBundle& b, const facs::KnowledgeBase& kb) {
  ValidationReport r;
  auto add = [&](const char* rule, std::string detail) { r.violations.push_back({rule, std::move(detail)}); };
  if (!facs::is_emotion_label(b.emotion) || b.intensity < 1 || b.intensity > 3) {
    add(rule::kBadLabel, "emotion '" + b.emotion + "' intensity " + std::to_string(b.intensity));
    return r;
  }
  if (trim(b.coarse_text).empty()) add(rule::kEmpty, "coarse_text is empty");
  if (trim(b.fine_text).empty()) add(rule::kEmpty, "fine_text is empty");
  if (!contains_ci(b.coarse_text, b.emotion)) {
    add(rule::kCoarseMissingEmotion, "coarse_text does not mention '" + b.emotion + "'");
  }
  const auto& profile = kb.lookup_emotion(b.emotion);
  const auto aus = mentioned_aus(b.fine_text, kb);
  if (profile.au_ids.empty()) {
    if (!aus.empty()) add(rule::kNeutralActivation, "neutral fine_text names an action unit");
    if (!contains_ci(b.fine_text, kNoActivationPhrase)) {
      add(rule::kNeutralActivation, "neutral fine_text must state that no action unit dominates");
    }
  } else {
    if (aus.empty()) add(rule::kFineNoAu, "fine_text names no action unit");
    if (mentioned_muscles(b.fine_text, kb).empty()) add(rule::kFineNoMuscle, "fine_text names no muscle");
    for (int id : aus) {
      if (std::find(profile.au_ids.begin(), profile.au_ids.end(), id) == profile.au_ids.end()) {
        add(rule::kAuOutsideProfile, "AU" + std::to_string(id) + " is not part of the " +
                                         b.emotion + " profile");
      }
    }
  }
  if (b.fine_text.size() < b.coarse_text.size()) {
    add(rule::kFineShorter, "fine_text is shorter than coarse_text");
  }
  return r;
}

PromptTemplates PromptTemplates::load(const std::string& dir) {
  PromptTemplates t;
  t.step1 = read_file(dir + "/step1_subject.txt");
  t.step2 = read_file(dir + "/step2_action_units.txt");
  t.step3 = read_file(dir + "/step3_muscles.txt");
  t.step4 = read_file(dir + "/step4_prompt_design.txt");
  return t;
}

const PromptTemplates& PromptTemplates::builtin() {
  static const PromptTemplates t = [] {
    const fs::path knowledge = facs::default_knowledge_path();
    return load((knowledge.parent_path() / "prompts").string());
  }();
  return t;
}

std::string render(std::string text, const std::vector<std::pair<std::string, std::string>>& vars) {
  for (const auto& [key, value] : vars) {
    const std::string token = "{" + key + "}";
    for (auto pos = text.find(token); pos != std::string::npos;
         pos = text.find(token, pos + value.size())) {
      text.replace(pos, token.size(), value);
    }
  }
  return text;
}

PromptBundle run_cot(const CotRequest& req, const CotOptions& opt) {
  const facs::KnowledgeBase& kb = opt.knowledge ? *opt.knowledge : facs::KnowledgeBase::builtin();
  const PromptTemplates& tpl = opt.templates ? *opt.templates : PromptTemplates::builtin();
  if (!facs::is_emotion_label(req.emotion)) throw CotError("unknown emotion '" + req.emotion + "'");
  if (req.intensity < 1 || req.intensity > 3) {
    throw CotError("intensity " + std::to_string(req.intensity) + " outside 1..3");
  }
  if (opt.backend == Backend::kLlm && !opt.chat) throw CotError("LLM backend requested without a client");

  const auto& profile = kb.lookup_emotion(req.emotion);
  const std::string adjective = kb.intensity(req.intensity).adjective;
  std::vector<std::pair<std::string, std::string>> vars{
      {"emotion", req.emotion},
      {"intensity", std::to_string(req.intensity)},
      {"intensity_adjective", lower(adjective)},
      {"au_catalog", au_catalog_text(kb)}};

  const RuleReplies rules{kb, profile, req.intensity};
  const SubjectAttributes sidecar = load_subject_sidecar(req.image_path);
  llm::Conversation conv;
  std::string image_png;
  if (opt.backend == Backend::kLlm && !req.image_path.empty()) image_png = read_file(req.image_path);

  // Each step either asks the model or records the deterministic reply.
  auto step = [&](const std::string& instruction, const std::string& rule_reply,
                  const std::string& image) -> std::string {
    if (opt.backend == Backend::kLlm) return llm::llm_step(conv, instruction, *opt.chat, image);
    conv.log.push_back({instruction, rule_reply, 0});
    return rule_reply;
  };

  PromptBundle b;
  b.emotion = req.emotion;
  b.intensity = req.intensity;
  CoTTrace& tr = b.trace;
  tr.backend = opt.backend == Backend::kLlm ? "llm" : "rules";

  const std::string subject_reply =
      "age_range: " + sidecar.age_range + "\ngender: " + sidecar.gender +
      "\nethnicity: " + sidecar.ethnicity + "\nappearance: " + sidecar.appearance_notes + "\n";
  tr.step1_subject = parse_subject(step(render(tpl.step1, vars), subject_reply, image_png));
  vars.push_back({"subject", subject_phrase(tr.step1_subject)});

  const std::string r2 = step(render(tpl.step2, vars), rules.step2(), {});
  tr.step2_aus = mentioned_aus(r2, kb);
  tr.step2_rationale = line_value(r2, "rationale");
  if (tr.step2_aus.empty() && !profile.au_ids.empty()) {
    throw CotError("action unit reply names no catalog action unit");
  }
  std::vector<std::string> au_lines;
  for (int id : tr.step2_aus) au_lines.push_back("AU" + std::to_string(id) + " " + kb.action_unit(id).name);
  vars.push_back({"action_units", au_lines.empty() ? "none\n" : join_lines(au_lines)});

  const std::string r3 = step(render(tpl.step3, vars), rules.step3(), {});
  if (mentioned_aus(r3, kb).empty() && !profile.au_ids.empty()) {
    throw CotError("muscle reply names no catalog action unit");
  }
  tr.step3_muscles = mentioned_muscles(r3, kb);
  tr.step3_rationale = line_value(r3, "rationale");
  vars.push_back({"muscle_analysis", r3});

  tr.step4_raw = step(render(tpl.step4, vars), rules.step4(tr.step1_subject), {});
  const Sections s = parse_sections(tr.step4_raw);
  b.coarse_text = s.coarse;
  b.fine_text = s.fine;
  tr.steps = std::move(conv.log);

  const ValidationReport report = validate_bundle(b, kb);
  if (!report.ok()) throw CotError("prompt bundle failed validation: " + report.summary());
  return b;
}

}  // namespace tbd::cot
