// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "mullama/qa_gen.hpp"
#include "toy_setup.hpp"

using namespace mullama;

namespace {

TrackAnnotation caption_track(const std::string& id) {
  return {id, "A calm piano piece with soft strings.", std::nullopt};
}

TrackAnnotation tags_track(const std::string& id) {
  return {id, std::nullopt, std::vector<std::string>{"rock", "drums", "fast"}};
}

std::vector<TrackAnnotation> corpus(int n) {
  std::vector<TrackAnnotation> c;
  for (int i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "t%03d", i);
    c.push_back(i % 2 ? tags_track(id) : caption_track(id));
  }
  return c;
}

// Fails on the n-th append.
class FailingSink final : public DatasetSink {
 public:
  explicit FailingSink(int fail_at) : fail_at_(fail_at) {}
  std::map<std::string, std::vector<QAPair>> completed() const override { return done_; }
  void append(const std::string& id, const std::vector<QAPair>& pairs) override {
    if (static_cast<int>(done_.size()) == fail_at_) throw std::runtime_error("disk full");
    done_[id] = pairs;
  }
  void finalize() override {}

 private:
  int fail_at_;
  std::map<std::string, std::vector<QAPair>> done_;
};

}  // namespace

TEST_CASE("fixed question set") {
  const auto& q = fixed_question_set();
  CHECK(q.size() == 4);
  CHECK(q[0] == "Describe the music");
}

TEST_CASE("generate_for_track: caption flow") {
  MockBackend mock;
  const auto pairs = generate_for_track(caption_track("a"), mock);
  REQUIRE(pairs.size() == 9);
  int fixed = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs[i].source == Source::kCaption);
    CHECK(pairs[i].track_id == "a");
    if (pairs[i].origin == Origin::kFixedQuestion) {
      CHECK(pairs[i].question == fixed_question_set()[i]);
      ++fixed;
    }
  }
  CHECK(fixed == 4);
  CHECK(mock.calls() == 2);
}

TEST_CASE("generate_for_track: tags flow and preference") {
  MockBackend mock;
  const auto pairs = generate_for_track(tags_track("b"), mock);
  REQUIRE(pairs.size() == 9);
  for (const auto& p : pairs) CHECK(p.source == Source::kTags);

  TrackAnnotation both = caption_track("c");
  both.tags = std::vector<std::string>{"x"};
  CHECK(both.preferred_source() == Source::kCaption);
  CHECK(annotation_content(tags_track("d"), Source::kTags) == "rock, drums, fast");

  TrackAnnotation none{"e", std::nullopt, std::nullopt};
  CHECK_THROWS_AS(generate_for_track(none, mock), InputError);
}

TEST_CASE("generate_for_track: failures") {
  MockBackend mock;
  mock.fail_track("bad");
  try {
    generate_for_track(caption_track("bad"), mock);
    FAIL("expected GenerationError");
  } catch (const GenerationError& e) {
    CHECK(e.track_id == "bad");
  }
  mock.garble_track("garbled");
  try {
    generate_for_track(caption_track("garbled"), mock);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.raw == "I am unable to answer that.");
  }
}

TEST_CASE("parse_backend_output") {
  const std::string five =
      "Here are the pairs:\n"
      "1. Q: What is the mood of the music? A: Calm.\n"
      "2. Q: Which instruments are played? A: Piano and strings.\n"
      "3) Question: What is the tempo?\n   Answer: Slow, around 60 bpm.\n"
      "4. Q: What genre is it? A: Classical.\n"
      "5. q: Is there singing? a: No.\n";
  const auto p = parse_backend_output(five, Expected::kFivePairs);
  REQUIRE(p.pairs.size() == 5);
  CHECK(p.pairs[0] == std::make_pair(std::string("What is the mood of the music?"), std::string("Calm.")));
  CHECK(p.pairs[2].second == "Slow, around 60 bpm.");
  CHECK(p.pairs[4].first == "Is there singing?");

  const auto f = parse_backend_output("1. A piano.\n2. Soft piano\nwith strings.\n3. Piano.\n4. Calm.", Expected::kFourAnswers);
  CHECK(f.answers == std::vector<std::string>{"A piano.", "Soft piano with strings.", "Piano.", "Calm."});

  CHECK_THROWS_AS(parse_backend_output("", Expected::kFourAnswers), ParseError);
  CHECK_THROWS_AS(parse_backend_output("1. a\n2. b\n3. c", Expected::kFourAnswers), ParseError);
  CHECK_THROWS_AS(parse_backend_output("1. a\n3. b\n4. c\n5. d", Expected::kFourAnswers), ParseError);
  CHECK_THROWS_AS(parse_backend_output("1. Q: a\n2. b\n3. c\n4. d\n5. e", Expected::kFivePairs), ParseError);
}

TEST_CASE("instruction templates") {
  const auto set = InstructionSet::builtin();
  CHECK(set.get(Source::kCaption, Expected::kFourAnswers).expected_outputs() == 4);
  CHECK(set.get(Source::kTags, Expected::kFivePairs).expected_outputs() == 5);
  const auto& t = set.get(Source::kCaption, Expected::kFivePairs);
  const auto rendered = t.render("a calm song");
  CHECK(rendered.find("a calm song") != std::string::npos);
  CHECK(rendered.find(kContentPlaceholder) == std::string::npos);

  InstructionTemplate bad{"x", "no placeholder", Expected::kFourAnswers};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  fixture::TempDir dir("prompts");
  for (const char* name : {"caption_fixed", "tags_fixed", "caption_open", "tags_open"}) {
    std::ofstream(dir / (std::string(name) + ".txt")) << "Custom " << name << ": {content}";
  }
  const auto loaded = InstructionSet::load(dir.path());
  CHECK(loaded.get(Source::kTags, Expected::kFourAnswers).render("x") == "Custom tags_fixed: x");
  std::filesystem::remove(dir / "tags_open.txt");
  CHECK_THROWS(InstructionSet::load(dir.path()));
}

TEST_CASE("QAPair JSON") {
  const QAPair p{"t1", "Q?", "A \"quoted\".", Origin::kOpenEnded, Source::kTags};
  const auto line = p.to_json_line();
  CHECK(line.rfind("{\"track_id\":\"t1\",\"question\":", 0) == 0);
  CHECK(QAPair::from_json(nlohmann::json::parse(line)) == p);
  CHECK(parse_origin(to_string(Origin::kFixedQuestion)) == Origin::kFixedQuestion);
  CHECK(parse_source("caption") == Source::kCaption);
}

TEST_CASE("retrying backend") {
  auto mock = std::make_shared<MockBackend>();
  std::vector<long> delays;
  RetryingBackend retry(mock, {3, std::chrono::milliseconds(100), 2.0},
                        [&](std::chrono::milliseconds d) { delays.push_back(d.count()); });
  mock->fail_next(2);
  BackendRequest req{"p", "t", Expected::kFourAnswers, "calm piano"};
  CHECK_NOTHROW(retry.complete(req));
  CHECK(delays == std::vector<long>{100, 200});
  mock->fail_next(3);
  CHECK_THROWS_AS(retry.complete(req), BackendError);
}

TEST_CASE("build_dataset") {
  fixture::TempDir dir("ds");
  const auto out = dir / "qa.jsonl";

  SUBCASE("empty corpus") {
    MockBackend mock;
    JsonlDatasetSink sink(out, false);
    const auto m = build_dataset({}, mock, sink);
    CHECK(m.tracks_total == 0);
    CHECK(m.pairs_total == 0);
    CHECK(m.complete);
    CHECK(read_pairs(out).empty());
  }
  SUBCASE("counts, determinism and parallelism") {
    MockBackend mock;
    JsonlDatasetSink sink(out, false);
    const auto m = build_dataset(corpus(10), mock, sink);
    CHECK(m.pairs_total == 90);
    CHECK(m.pairs_by_origin.at("fixed_question") == 40);
    CHECK(m.pairs_by_origin.at("open_ended") == 50);
    CHECK(m.pairs_by_source.at("caption") == 45);
    const auto first = fixture::read_file(out);

    MockBackend mock2;
    JsonlDatasetSink sink2(dir / "qa2.jsonl", false);
    BuildOptions par;
    par.parallelism = 4;
    build_dataset(corpus(10), mock2, sink2, par);
    CHECK(fixture::read_file(dir / "qa2.jsonl") == first);
  }
  SUBCASE("resume does not re-query finished tracks") {
    MockBackend mock;
    {
      JsonlDatasetSink sink(out, false);
      BuildOptions stop;
      stop.stop_after = 4;
      const auto m = build_dataset(corpus(10), mock, sink, stop);
      CHECK_FALSE(m.complete);
      CHECK(m.tracks_completed == 4);
    }
    CHECK(mock.calls() == 8);
    JsonlDatasetSink resumed(out, true);
    const auto m = build_dataset(corpus(10), mock, resumed);
    CHECK(m.complete);
    CHECK(m.tracks_resumed == 4);
    CHECK(mock.calls() == 20);
    for (const auto& t : corpus(10)) CHECK(mock.calls_for(t.track_id) == 2);
    CHECK(read_pairs(out).size() == 90);
  }
  SUBCASE("failed tracks are reported, others finish") {
    MockBackend mock;
    mock.fail_track("t003");
    JsonlDatasetSink sink(out, false);
    const auto m = build_dataset(corpus(6), mock, sink);
    CHECK_FALSE(m.complete);
    REQUIRE(m.failures.size() == 1);
    CHECK(m.failures[0].first == "t003");
    CHECK(m.tracks_completed == 5);
  }
  SUBCASE("sink failure aborts with the completed work") {
    MockBackend mock;
    FailingSink sink(3);
    try {
      build_dataset(corpus(6), mock, sink);
      FAIL("expected SinkError");
    } catch (const SinkError& e) {
      CHECK(e.manifest.tracks_completed == 3);
      CHECK_FALSE(e.manifest.complete);
    }
  }
}

TEST_CASE("annotation reading") {
  const auto anns = read_annotations(fixture::data_dir() / "annotations_500.jsonl");
  REQUIRE(anns.size() == 500);
  CHECK(anns[0].caption.has_value());
  CHECK_FALSE(anns[0].tags.has_value());
  CHECK(anns[1].tags.has_value());
  CHECK_FALSE(anns[1].caption.has_value());
  fixture::TempDir dir("ann");
  std::ofstream(dir / "bad.jsonl") << "{\"track_id\": \"x\"}\n";
  CHECK_THROWS_AS(read_annotations(dir / "bad.jsonl"), InputError);
}

TEST_CASE("remote backend against a loopback server") {
  httplib::Server server;
  std::string seen_auth, seen_model;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    const auto body = nlohmann::json::parse(req.body);
    seen_model = body["model"];
    const std::string prompt = body["messages"][0]["content"];
    nlohmann::json reply{{"choices", {{{"message", {{"role", "assistant"}, {"content", "echo: " + prompt}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  server.Post("/broken", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("MULLAMA_TEST_TOKEN", "secret", 1);
  RemoteBackendConfig cfg{"http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions", "toy-llm",
                          "MULLAMA_TEST_TOKEN", 5.0};
  auto backend = make_remote_backend(cfg);
  CHECK(backend->complete({"hello", "t", Expected::kFourAnswers, ""}) == "echo: hello");
  CHECK(seen_auth == "Bearer secret");
  CHECK(seen_model == "toy-llm");

  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/broken";
  CHECK_THROWS_AS(make_remote_backend(cfg)->complete({"x", "t", Expected::kFourAnswers, ""}), BackendError);

  server.stop();
  th.join();

  cfg.endpoint = "not a url";
  CHECK_THROWS_AS(make_remote_backend(cfg), ConfigError);
}
