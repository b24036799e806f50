// SPDX-License-Identifier: Apache-2.0
#include "mullama/qa_gen.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <thread>

#include "mullama/text.hpp"

namespace mullama {

// Generated from assets/prompts/*.txt at configure time.
#include "prompts_builtin.inc"

std::string to_string(Origin o) {
  return o == Origin::kFixedQuestion ? "fixed_question" : "open_ended";
}
std::string to_string(Source s) { return s == Source::kCaption ? "caption" : "tags"; }

Origin parse_origin(const std::string& s) {
  if (s == "fixed_question") return Origin::kFixedQuestion;
  if (s == "open_ended") return Origin::kOpenEnded;
  throw InputError("unknown origin '" + s + "'");
}
Source parse_source(const std::string& s) {
  if (s == "caption") return Source::kCaption;
  if (s == "tags") return Source::kTags;
  throw InputError("unknown source '" + s + "'");
}

const std::array<std::string, 4>& fixed_question_set() {
  static const std::array<std::string, 4> q{"Describe the music", "Describe the music in detail",
                                            "What do you hear in the audio",
                                            "What can be inferred from the audio"};
  return q;
}

// ---------------------------------------------------------------------------
// Records

void TrackAnnotation::validate() const {
  if (track_id.empty()) throw InputError("annotation has an empty track_id");
  const bool has_caption = caption && !trim(*caption).empty();
  if (!has_caption && !tags) {
    throw InputError("track '" + track_id + "' has neither a caption nor tags");
  }
  if (tags) {
    if (tags->empty()) throw InputError("track '" + track_id + "' has an empty tag list");
    for (const auto& t : *tags) {
      if (trim(t).empty()) throw InputError("track '" + track_id + "' has an empty tag");
    }
  }
}

Source TrackAnnotation::preferred_source() const {
  return caption && !trim(*caption).empty() ? Source::kCaption : Source::kTags;
}

TrackAnnotation TrackAnnotation::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("annotation record must be a JSON object");
  TrackAnnotation a;
  if (!j.contains("track_id") || !j["track_id"].is_string()) {
    throw InputError("annotation record needs a string track_id");
  }
  a.track_id = j["track_id"].get<std::string>();
  if (j.contains("caption") && !j["caption"].is_null()) {
    if (!j["caption"].is_string()) throw InputError("track '" + a.track_id + "': caption must be a string");
    a.caption = j["caption"].get<std::string>();
  }
  if (j.contains("tags") && !j["tags"].is_null()) {
    if (!j["tags"].is_array()) throw InputError("track '" + a.track_id + "': tags must be a list");
    std::vector<std::string> tags;
    for (const auto& t : j["tags"]) {
      if (!t.is_string()) throw InputError("track '" + a.track_id + "': tags must be strings");
      tags.push_back(t.get<std::string>());
    }
    a.tags = std::move(tags);
  }
  a.validate();
  return a;
}

nlohmann::json TrackAnnotation::to_json() const {
  nlohmann::ordered_json j;
  j["track_id"] = track_id;
  if (caption) j["caption"] = *caption;
  if (tags) j["tags"] = *tags;
  return nlohmann::json::parse(j.dump());
}

void QAPair::validate() const {
  if (track_id.empty()) throw InputError("QA pair has an empty track_id");
  if (trim(question).empty() || trim(answer).empty()) {
    throw InputError("QA pair for '" + track_id + "' has an empty question or answer");
  }
  if (origin == Origin::kFixedQuestion) {
    const auto& q = fixed_question_set();
    if (std::find(q.begin(), q.end(), question) == q.end()) {
      throw InputError("fixed-question pair for '" + track_id + "' uses non-canonical question '" +
                       question + "'");
    }
  }
}

QAPair QAPair::from_json(const nlohmann::json& j) {
  try {
    QAPair p{j.at("track_id").get<std::string>(), j.at("question").get<std::string>(),
             j.at("answer").get<std::string>(), parse_origin(j.at("origin").get<std::string>()),
             parse_source(j.at("source").get<std::string>())};
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed QA record: ") + e.what());
  }
}

std::string QAPair::to_json_line() const {
  nlohmann::ordered_json j;
  j["track_id"] = track_id;
  j["question"] = question;
  j["answer"] = answer;
  j["origin"] = to_string(origin);
  j["source"] = to_string(source);
  return j.dump();
}

// ---------------------------------------------------------------------------
// Templates

void InstructionTemplate::validate() const {
  if (template_id.empty()) throw ConfigError("instruction template has no id");
  const auto first = prompt_text.find(kContentPlaceholder);
  if (first == std::string::npos ||
      prompt_text.find(kContentPlaceholder, first + 1) != std::string::npos) {
    throw ConfigError("instruction template '" + template_id + "' must contain " +
                      std::string(kContentPlaceholder) + " exactly once");
  }
}

std::string InstructionTemplate::render(const std::string& content) const {
  validate();
  std::string out = prompt_text;
  out.replace(out.find(kContentPlaceholder), kContentPlaceholder.size(), content);
  return out;
}

namespace {

InstructionTemplate make_template(std::string id, std::string text) {
  const Expected e = id.ends_with("_fixed") ? Expected::kFourAnswers : Expected::kFivePairs;
  InstructionTemplate t{std::move(id), std::move(text), e};
  t.validate();
  return t;
}

}  // namespace

InstructionSet InstructionSet::builtin() {
  return {make_template("caption_fixed", kBuiltinCaptionFixed),
          make_template("tags_fixed", kBuiltinTagsFixed),
          make_template("caption_open", kBuiltinCaptionOpen),
          make_template("tags_open", kBuiltinTagsOpen)};
}

InstructionSet InstructionSet::load(const std::filesystem::path& dir) {
  auto read = [&dir](const std::string& id) {
    const auto path = dir / (id + ".txt");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("missing instruction template " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return make_template(id, ss.str());
  };
  return {read("caption_fixed"), read("tags_fixed"), read("caption_open"), read("tags_open")};
}

const InstructionTemplate& InstructionSet::get(Source source, Expected expected) const {
  if (source == Source::kCaption) {
    return expected == Expected::kFourAnswers ? caption_fixed : caption_open;
  }
  return expected == Expected::kFourAnswers ? tags_fixed : tags_open;
}

std::string annotation_content(const TrackAnnotation& ann, Source source) {
  if (source == Source::kCaption) {
    if (!ann.caption) throw InputError("track '" + ann.track_id + "' has no caption");
    return trim(*ann.caption);
  }
  if (!ann.tags) throw InputError("track '" + ann.track_id + "' has no tags");
  std::string out;
  for (const auto& t : *ann.tags) {
    if (!out.empty()) out += ", ";
    out += trim(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mock backend

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string strip_period(std::string s) {
  while (!s.empty() && (s.back() == '.' || s.back() == ' ')) s.pop_back();
  return s;
}

std::string first_words(const std::string& s, std::size_t n) {
  std::istringstream in(s);
  std::string w, out;
  for (std::size_t i = 0; i < n && in >> w; ++i) out += (out.empty() ? "" : " ") + w;
  return strip_period(out);
}

}  // namespace

std::string MockBackend::complete(const BackendRequest& req) {
  ++calls_;
  bool fail = false, garble = false;
  {
    std::lock_guard l(mu_);
    ++per_track_[req.track_id];
    fail = failing_.count(req.track_id) > 0;
    garble = garbled_.count(req.track_id) > 0;
  }
  if (fail) throw BackendError("mock backend: injected failure for " + req.track_id);
  for (int n = fail_next_.load(); n > 0; n = fail_next_.load()) {
    if (fail_next_.compare_exchange_weak(n, n - 1)) {
      throw BackendError("mock backend: injected transient failure");
    }
  }
  if (garble) return "I am unable to answer that.";

  const std::string c = strip_period(trim(req.content));
  std::vector<std::string> words;
  for (auto& w : tokenize(c)) {
    if (w.size() > 2 && std::isalpha(static_cast<unsigned char>(w[0]))) words.push_back(w);
  }
  if (words.empty()) words.push_back("music");
  const std::uint64_t h = fnv1a(c);
  auto pick = [&](int k) { return words[(h >> (8 * k)) % words.size()]; };

  std::ostringstream out;
  if (req.expected == Expected::kFourAnswers) {
    out << "1. The music is " << first_words(c, 8) << ".\n"
        << "2. In detail, the piece is " << c << ".\n"
        << "3. I hear " << pick(0) << " and " << pick(1) << " in the audio.\n"
        << "4. It can be inferred that the music feels " << pick(2) << ".\n";
  } else {
    out << "1. Q: What emotion does the music convey? A: It conveys a " << pick(3) << " feeling.\n"
        << "2. Q: What is the tempo of the music? A: The tempo suits " << pick(4) << " music.\n"
        << "3. Q: What genre does the music belong to? A: It is closest to " << pick(5) << ".\n"
        << "4. Q: Which instruments can be heard? A: Mainly " << pick(6) << ".\n"
        << "5. Q: What is the overall mood? A: The mood is " << pick(7) << " and "
        << first_words(c, 3) << ".\n";
  }
  return out.str();
}

long MockBackend::calls_for(const std::string& track_id) const {
  std::lock_guard l(mu_);
  const auto it = per_track_.find(track_id);
  return it == per_track_.end() ? 0 : it->second;
}

// ---------------------------------------------------------------------------
// Retry

RetryingBackend::RetryingBackend(std::shared_ptr<LLMBackend> inner, RetryPolicy policy,
                                 Sleeper sleeper)
    : inner_(std::move(inner)), policy_(policy), sleep_(std::move(sleeper)) {
  if (!inner_) throw ConfigError("retrying backend needs an inner backend");
  if (policy_.attempts < 1) throw ConfigError("retry policy needs at least one attempt");
  if (!sleep_) sleep_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::string RetryingBackend::complete(const BackendRequest& request) {
  auto delay = policy_.initial_delay;
  std::string last;
  for (int attempt = 1; attempt <= policy_.attempts; ++attempt) {
    try {
      return inner_->complete(request);
    } catch (const BackendError& e) {
      last = e.what();
      if (attempt < policy_.attempts) {
        sleep_(delay);
        delay = std::chrono::milliseconds(
            static_cast<long>(static_cast<double>(delay.count()) * policy_.multiplier));
      }
    }
  }
  throw BackendError("backend failed after " + std::to_string(policy_.attempts) +
                     " attempts: " + last);
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

// Splits "N. text" / "N) text" items; lines before the first item are
// ignored, later unnumbered lines continue the current item.
std::vector<std::string> numbered_items(const std::string& raw) {
  std::vector<std::string> items;
  std::istringstream in(raw);
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty()) continue;
    std::size_t i = 0;
    while (i < t.size() && std::isdigit(static_cast<unsigned char>(t[i]))) ++i;
    const bool numbered = i > 0 && i < t.size() && (t[i] == '.' || t[i] == ')') &&
                          (i + 1 == t.size() || std::isspace(static_cast<unsigned char>(t[i + 1])));
    if (numbered) {
      const long n = std::stol(t.substr(0, i));
      if (n != static_cast<long>(items.size()) + 1) {
        throw ParseError("malformed numbering: expected item " +
                             std::to_string(items.size() + 1) + ", found " + std::to_string(n),
                         raw);
      }
      items.push_back(trim(t.substr(i + 1)));
    } else if (!items.empty()) {
      items.back() += " " + t;
    }
  }
  return items;
}

// Case-insensitive search for a label such as "Q:" at a word boundary.
std::size_t find_label(const std::string& s, const std::vector<std::string>& labels,
                       std::size_t from, std::size_t& len) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::size_t best = std::string::npos;
  for (const auto& l : labels) {
    for (std::size_t p = lower.find(l, from); p != std::string::npos; p = lower.find(l, p + 1)) {
      if (p == 0 || !std::isalpha(static_cast<unsigned char>(lower[p - 1]))) {
        if (p < best) {
          best = p;
          len = l.size();
        }
        break;
      }
    }
  }
  return best;
}

}  // namespace

ParsedOutput parse_backend_output(const std::string& raw, Expected expected) {
  if (trim(raw).empty()) throw ParseError("empty backend output", raw);
  const auto items = numbered_items(raw);
  const std::size_t want = expected == Expected::kFourAnswers ? 4 : 5;
  if (items.size() != want) {
    throw ParseError("expected " + std::to_string(want) + " numbered items, found " +
                         std::to_string(items.size()),
                     raw);
  }
  ParsedOutput out;
  for (std::size_t k = 0; k < items.size(); ++k) {
    const std::string& item = items[k];
    if (item.empty()) throw ParseError("item " + std::to_string(k + 1) + " is empty", raw);
    if (expected == Expected::kFourAnswers) {
      out.answers.push_back(item);
      continue;
    }
    std::size_t qlen = 0, alen = 0;
    const std::size_t qp = find_label(item, {"q:", "question:"}, 0, qlen);
    const std::size_t ap = qp == std::string::npos
                               ? std::string::npos
                               : find_label(item, {"a:", "answer:"}, qp + qlen, alen);
    if (qp == std::string::npos || ap == std::string::npos) {
      throw ParseError("item " + std::to_string(k + 1) + " lacks a 'Q: ... A: ...' pair", raw);
    }
    std::string q = trim(item.substr(qp + qlen, ap - qp - qlen));
    std::string a = trim(item.substr(ap + alen));
    if (q.empty() || a.empty()) {
      throw ParseError("item " + std::to_string(k + 1) + " has an empty question or answer", raw);
    }
    out.pairs.emplace_back(std::move(q), std::move(a));
  }
  return out;
}

std::vector<QAPair> generate_for_track(const TrackAnnotation& ann, LLMBackend& backend,
                                       const InstructionSet& instructions) {
  ann.validate();
  const Source source = ann.preferred_source();
  const std::string content = annotation_content(ann, source);
  auto ask = [&](Expected expected) {
    const auto& tmpl = instructions.get(source, expected);
    const BackendRequest req{tmpl.render(content), ann.track_id, expected, content};
    std::string raw;
    try {
      raw = backend.complete(req);
    } catch (const BackendError& e) {
      throw GenerationError(ann.track_id, e.what());
    }
    return parse_backend_output(raw, expected);
  };
  std::vector<QAPair> pairs;
  const auto fixed = ask(Expected::kFourAnswers);
  for (std::size_t i = 0; i < 4; ++i) {
    pairs.push_back({ann.track_id, fixed_question_set()[i], fixed.answers[i],
                     Origin::kFixedQuestion, source});
  }
  const auto open = ask(Expected::kFivePairs);
  for (const auto& [q, a] : open.pairs) {
    pairs.push_back({ann.track_id, q, a, Origin::kOpenEnded, source});
  }
  for (const auto& p : pairs) p.validate();
  return pairs;
}

// ---------------------------------------------------------------------------
// Dataset building

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json f = nlohmann::json::array();
  for (const auto& [id, err] : failures) f.push_back({{"track_id", id}, {"error", err}});
  return {{"tracks_total", tracks_total},
          {"tracks_completed", tracks_completed},
          {"tracks_resumed", tracks_resumed},
          {"tracks_failed", static_cast<long>(failures.size())},
          {"pairs_total", pairs_total},
          {"pairs_by_source", pairs_by_source},
          {"pairs_by_origin", pairs_by_origin},
          {"failures", f},
          {"backend_calls", backend_calls},
          {"complete", complete}};
}

JsonlDatasetSink::JsonlDatasetSink(std::filesystem::path output, bool resume)
    : output_(std::move(output)) {
  const auto log = progress_path();
  if (!resume) {
    std::error_code ec;
    std::filesystem::remove(log, ec);
    return;
  }
  std::ifstream in(log);
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      std::vector<QAPair> pairs;
      for (const auto& p : j.at("pairs")) pairs.push_back(QAPair::from_json(p));
      done_[j.at("track_id").get<std::string>()] = std::move(pairs);
    } catch (const std::exception&) {
      // A torn final line from an interrupted run; that track is redone.
      if (in.peek() != EOF) {
        throw InputError(log.string() + ":" + std::to_string(lineno) + ": corrupt resume log");
      }
    }
  }
}

std::filesystem::path JsonlDatasetSink::progress_path() const {
  return std::filesystem::path(output_.string() + ".progress");
}

std::map<std::string, std::vector<QAPair>> JsonlDatasetSink::completed() const { return done_; }

void JsonlDatasetSink::append(const std::string& track_id, const std::vector<QAPair>& pairs) {
  nlohmann::ordered_json j;
  j["track_id"] = track_id;
  j["pairs"] = nlohmann::json::array();
  for (const auto& p : pairs) j["pairs"].push_back(nlohmann::ordered_json::parse(p.to_json_line()));
  std::ofstream out(progress_path(), std::ios::app);
  out << j.dump() << '\n';
  out.flush();
  if (!out) throw std::runtime_error("cannot append to " + progress_path().string());
  done_[track_id] = pairs;
}

void JsonlDatasetSink::finalize() {
  const auto tmp = std::filesystem::path(output_.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    for (const auto& [id, pairs] : done_) {
      for (const auto& p : pairs) out << p.to_json_line() << '\n';
    }
    out.flush();
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, output_);
}

namespace {

class CountingBackend final : public LLMBackend {
 public:
  explicit CountingBackend(LLMBackend& inner) : inner_(inner) {}
  std::string name() const override { return inner_.name(); }
  std::string complete(const BackendRequest& r) override {
    ++calls;
    return inner_.complete(r);
  }
  std::atomic<long> calls{0};

 private:
  LLMBackend& inner_;
};

}  // namespace

DatasetManifest build_dataset(const std::vector<TrackAnnotation>& corpus, LLMBackend& backend,
                              DatasetSink& sink, const BuildOptions& options) {
  if (options.parallelism < 1) throw ConfigError("parallelism must be >= 1");
  std::set<std::string> seen;
  for (const auto& a : corpus) {
    a.validate();
    if (!seen.insert(a.track_id).second) throw InputError("duplicate track_id '" + a.track_id + "'");
  }
  for (const auto* t : {&options.instructions.caption_fixed, &options.instructions.tags_fixed,
                        &options.instructions.caption_open, &options.instructions.tags_open}) {
    t->validate();
  }

  DatasetManifest m;
  m.tracks_total = static_cast<long>(corpus.size());
  const auto already = sink.completed();
  std::vector<const TrackAnnotation*> pending;
  for (const auto& a : corpus) {
    const auto it = already.find(a.track_id);
    if (it != already.end() && it->second.size() == 9) {
      ++m.tracks_resumed;
    } else {
      pending.push_back(&a);
    }
  }
  if (options.stop_after >= 0 && static_cast<long>(pending.size()) > options.stop_after) {
    pending.resize(static_cast<std::size_t>(options.stop_after));
  }

  CountingBackend counting(backend);
  std::mutex mu;  // guards sink, manifest and sink_error
  std::string sink_error;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  auto worker = [&] {
    for (std::size_t i = next++; i < pending.size() && !abort; i = next++) {
      const TrackAnnotation& ann = *pending[i];
      std::vector<QAPair> pairs;
      std::string error;
      try {
        pairs = generate_for_track(ann, counting, options.instructions);
      } catch (const std::exception& e) {
        error = e.what();
      }
      std::lock_guard l(mu);
      if (!error.empty()) {
        m.failures.emplace_back(ann.track_id, error);
        continue;
      }
      try {
        sink.append(ann.track_id, pairs);
      } catch (const std::exception& e) {
        sink_error = e.what();
        abort = true;
      }
    }
  };
  std::vector<std::thread> threads;
  const int n = std::min<int>(options.parallelism, static_cast<int>(std::max<std::size_t>(1, pending.size())));
  for (int t = 1; t < n; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  m.backend_calls = counting.calls;

  std::sort(m.failures.begin(), m.failures.end());
  const auto done = sink.completed();
  for (const auto& a : corpus) {
    const auto it = done.find(a.track_id);
    if (it == done.end()) continue;
    ++m.tracks_completed;
    for (const auto& p : it->second) {
      ++m.pairs_total;
      ++m.pairs_by_source[to_string(p.source)];
      ++m.pairs_by_origin[to_string(p.origin)];
    }
  }
  if (!sink_error.empty()) throw SinkError("dataset sink failed: " + sink_error, m);
  m.complete = m.tracks_completed == m.tracks_total;
  if (m.complete) {
    try {
      sink.finalize();
    } catch (const std::exception& e) {
      m.complete = false;
      throw SinkError(std::string("dataset sink failed: ") + e.what(), m);
    }
  }
  return m;
}

std::vector<TrackAnnotation> read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open annotations file " + path.string());
  std::vector<TrackAnnotation> out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(TrackAnnotation::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<QAPair> read_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset file " + path.string());
  std::vector<QAPair> out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(QAPair::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mullama
