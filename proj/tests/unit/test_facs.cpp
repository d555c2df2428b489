#include <doctest.h>

#include <fstream>
#include <set>

#include "test_util.hpp"
#include "tbd/facs.hpp"
#include "tbd/io.hpp"

using namespace tbd;
using namespace tbd::facs;
using nlohmann::json;

namespace {

json shipped() { return json::parse(io::read_text_file(default_knowledge_path())); }

}  // namespace

TEST_SUITE("facs") {

TEST_CASE("shipped knowledge covers every label with consistent references") {
  const auto& kb = KnowledgeBase::builtin();
  CHECK(emotion_labels().size() == 8);
  for (const auto& label : emotion_labels()) {
    const auto& p = kb.lookup_emotion(label);
    CHECK(p.label == label);
    if (label == "neutral") {
      CHECK(p.au_ids.empty());
      continue;
    }
    CHECK_FALSE(p.au_ids.empty());
    for (int id : p.au_ids) {
      const auto& au = kb.action_unit(id);
      for (const auto& m : au.muscles) CHECK(kb.muscles().count(m) == 1);
    }
  }
  CHECK(kb.lookup_emotion("happy").au_ids == std::vector<int>{6, 12});
  CHECK(kb.lookup_emotion("surprise").au_ids == std::vector<int>{1, 2, 5, 26});
}

TEST_CASE("lookups reject unknown labels, ids and levels") {
  const auto& kb = KnowledgeBase::builtin();
  CHECK_THROWS_AS(kb.lookup_emotion("joy"), FacsError);
  CHECK_THROWS_AS(kb.lookup_emotion("Happy"), FacsError);
  CHECK_THROWS_AS(kb.action_unit(3), FacsError);
  CHECK_THROWS_AS(kb.intensity(0), FacsError);
  CHECK_THROWS_AS(kb.intensity(4), FacsError);
  CHECK(is_emotion_label("contempt"));
  CHECK_FALSE(is_emotion_label(""));
}

TEST_CASE("describe_au substitutes the degree word of the level") {
  const auto& kb = KnowledgeBase::builtin();
  const json doc = shipped();
  std::string movement;
  for (const auto& au : doc.at("action_units")) {
    if (au.at("id") == 26) movement = au.at("movement_text").get<std::string>();
  }
  REQUIRE_FALSE(movement.empty());
  const auto pos = movement.find("{degree}");
  REQUIRE(pos != std::string::npos);
  std::string expected = movement;
  expected.replace(pos, 8, "fully");
  CHECK(kb.describe_au(26, 3) == "Intense jaw drop (AU26): " + expected);
  expected = movement;
  expected.replace(pos, 8, "noticeably");
  CHECK(kb.describe_au(26, 2) == "Moderate jaw drop (AU26): " + expected);
  // AU12 has no amplitude override and uses the level default.
  CHECK(kb.describe_au(12, 1).find(" slightly ") != std::string::npos);
  CHECK(kb.intensity(3).modifier_for(12) == "strongly");
}

TEST_CASE("validation catches damaged knowledge files") {
  const json good = shipped();
  CHECK_NOTHROW(KnowledgeBase::from_json(good));

  json d = good;
  d.at("action_units")[0]["movement_text"] = "no placeholder here";
  CHECK_THROWS_AS(KnowledgeBase::from_json(d), FacsError);

  d = good;
  d.at("action_units")[0]["muscles"] = json::array({"unknown muscle"});
  CHECK_THROWS_AS(KnowledgeBase::from_json(d), FacsError);

  d = good;
  d.at("action_units").push_back(good.at("action_units")[0]);
  CHECK_THROWS_AS(KnowledgeBase::from_json(d), FacsError);

  d = good;
  for (auto& e : d.at("emotions")) {
    if (e.at("label") == "happy") e["au_ids"] = json::array({6, 99});
  }
  CHECK_THROWS_AS(KnowledgeBase::from_json(d), FacsError);

  d = good;
  d.at("emotions").erase(d.at("emotions").begin() + 1);
  CHECK_THROWS_AS(KnowledgeBase::from_json(d), FacsError);

  d = good;
  d.at("intensities")[1]["adjective"] = d.at("intensities")[0]["adjective"];
  CHECK_THROWS_AS(KnowledgeBase::from_json(d), FacsError);

  d = good;
  d["format"] = "other";
  CHECK_THROWS_AS(KnowledgeBase::from_json(d), FacsError);

  CHECK_THROWS_AS(KnowledgeBase::load("/nonexistent/facs.json"), FacsError);
}

TEST_CASE("action unit JSON round trip") {
  const auto& au = KnowledgeBase::builtin().action_unit(4);
  CHECK(json(au).get<ActionUnit>() == au);
  const auto& p = KnowledgeBase::builtin().lookup_emotion("fear");
  CHECK(json(p).get<EmotionProfile>() == p);
}

}  // TEST_SUITE
