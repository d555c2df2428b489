#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "tbd/facs.hpp"
#include "tbd/llm.hpp"

// Four-step prompt decomposition: subject attributes, action units, muscle
// mechanics and prompt design, producing a coarse and a fine text.
namespace tbd::cot {

struct CotError : Error {
  using Error::Error;
};

struct SubjectAttributes {
  std::string age_range = "unspecified";
  std::string gender = "unspecified";
  std::string ethnicity = "unspecified";
  std::string appearance_notes = "unspecified";

  bool operator==(const SubjectAttributes&) const = default;
};

/// Sidecar file `<image>.subject.json`, or all "unspecified" when absent.
SubjectAttributes load_subject_sidecar(const std::string& image_path);

struct CoTTrace {
  SubjectAttributes step1_subject;
  std::vector<int> step2_aus;
  std::string step2_rationale;
  std::vector<std::string> step3_muscles;
  std::string step3_rationale;
  std::string step4_raw;
  std::string backend;  // "rules" or "llm"
  std::vector<llm::Exchange> steps;  // one per step, in order

  bool operator==(const CoTTrace&) const;
};

struct PromptBundle {
  std::string coarse_text;
  std::string fine_text;
  std::string emotion;
  int intensity = 1;
  CoTTrace trace;

  bool operator==(const PromptBundle&) const;
};

void to_json(nlohmann::json& j, const SubjectAttributes& s);
void from_json(const nlohmann::json& j, SubjectAttributes& s);
void to_json(nlohmann::json& j, const CoTTrace& t);
void from_json(const nlohmann::json& j, CoTTrace& t);
void to_json(nlohmann::json& j, const PromptBundle& b);
void from_json(const nlohmann::json& j, PromptBundle& b);

std::string bundle_filename(const std::string& clip_id);
void save_bundle(const PromptBundle& bundle, const std::string& path);
PromptBundle load_bundle(const std::string& path);

struct Violation {
  std::string rule;
  std::string detail;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  bool has(const std::string& rule) const;
  std::string summary() const;
};

namespace rule {
inline constexpr const char* kEmpty = "empty-text";
inline constexpr const char* kCoarseMissingEmotion = "coarse-missing-emotion";
inline constexpr const char* kFineNoAu = "fine-no-au";
inline constexpr const char* kFineNoMuscle = "fine-no-muscle";
inline constexpr const char* kFineShorter = "fine-shorter-than-coarse";
inline constexpr const char* kAuOutsideProfile = "au-outside-profile";
inline constexpr const char* kNeutralActivation = "neutral-mentions-activation";
inline constexpr const char* kBadLabel = "invalid-emotion-or-intensity";
}  // namespace rule

/// Lint rules for a bundle. Neutral bundles are exempt from the AU and
/// muscle mention rules and must instead state that no AU is dominant.
ValidationReport validate_bundle(const PromptBundle& bundle,
                                 const facs::KnowledgeBase& kb = facs::KnowledgeBase::builtin());

/// AU ids whose names occur in text, case-insensitively, in catalog order.
std::vector<int> mentioned_aus(const std::string& text, const facs::KnowledgeBase& kb);
std::vector<std::string> mentioned_muscles(const std::string& text, const facs::KnowledgeBase& kb);

/// Phrase the neutral fine text uses; validate_bundle looks for it.
inline constexpr const char* kNoActivationPhrase = "no dominant action unit";

/// The four step templates, loaded from a directory.
struct PromptTemplates {
  std::string step1, step2, step3, step4;
  static PromptTemplates load(const std::string& dir);
  static const PromptTemplates& builtin();
};

/// Replaces each {key} in text.
std::string render(std::string text, const std::vector<std::pair<std::string, std::string>>& vars);

enum class Backend { kRules, kLlm };

struct CotRequest {
  std::string image_path;  // may be empty for the rules backend
  std::string emotion;
  int intensity = 1;
};

struct CotOptions {
  Backend backend = Backend::kRules;
  const facs::KnowledgeBase* knowledge = nullptr;  // builtin when null
  const PromptTemplates* templates = nullptr;      // builtin when null
  llm::ChatBackend* chat = nullptr;                // required for kLlm
};

/// Runs all four steps. Throws CotError on invalid input or when the
/// result fails validate_bundle, and llm::LlmError on transport failures.
PromptBundle run_cot(const CotRequest& request, const CotOptions& options = {});

}  // namespace tbd::cot
