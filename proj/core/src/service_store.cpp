#include <algorithm>
#include <chrono>
#include <fstream>
#include <mutex>
#include <random>
#include <set>
#include <shared_mutex>
#include <sstream>

#include "json_codec.hpp"
#include "palmlayout/errors.hpp"
#include "palmlayout/service.hpp"

namespace palm {

using nlohmann::json;

std::string_view to_string(RevisionMode m) {
  return m == RevisionMode::kFresh ? "fresh" : "correction";
}

std::optional<RevisionMode> revision_mode_from_string(std::string_view s) {
  if (s == "fresh") return RevisionMode::kFresh;
  if (s == "correction") return RevisionMode::kCorrection;
  return std::nullopt;
}

Clock system_clock_ms() {
  return [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
}

namespace {

std::string random_token() {
  std::random_device rd;
  std::ostringstream os;
  for (int i = 0; i < 4; ++i) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", rd());
    os << buf;
  }
  return os.str();
}

bool same_shape(const RegionInstance& a, const RegionInstance& b) {
  return a.region_class == b.region_class && a.boundary == b.boundary;
}

}  // namespace

namespace detail {

json revision_to_json(const AnnotationRevision& r) {
  json j;
  j["doc_id"] = r.doc_id;
  j["annotator_id"] = r.annotator_id;
  j["revision"] = r.revision;
  j["parent"] = r.parent ? json(*r.parent) : json(nullptr);
  j["mode"] = to_string(r.mode);
  j["session_id"] = r.session_id ? json(*r.session_id) : json(nullptr);
  j["created_at"] = r.created_at;
  json regions = json::array();
  for (const auto& reg : r.regions) regions.push_back(detail::region_to_json(reg));
  j["regions"] = std::move(regions);
  return j;
}

}  // namespace detail

namespace {

using detail::revision_to_json;

AnnotationRevision revision_from_json(const json& j) {
  AnnotationRevision r;
  r.doc_id = j.at("doc_id").get<std::string>();
  r.annotator_id = j.at("annotator_id").get<std::string>();
  r.revision = j.at("revision").get<int>();
  if (!j.at("parent").is_null()) r.parent = j.at("parent").get<int>();
  auto mode = revision_mode_from_string(j.at("mode").get<std::string>());
  if (!mode) throw ParseError("unknown revision mode");
  r.mode = *mode;
  if (!j.at("session_id").is_null()) r.session_id = j.at("session_id").get<std::string>();
  r.created_at = j.at("created_at").get<std::int64_t>();
  const auto& regions = j.at("regions");
  for (std::size_t i = 0; i < regions.size(); ++i)
    r.regions.push_back(detail::region_from_json(regions[i], "region #" + std::to_string(i)));
  return r;
}

}  // namespace

struct AnnotationStore::Impl {
  Clock clock;
  std::optional<std::filesystem::path> log_path;
  std::ofstream log;

  mutable std::shared_mutex mu;
  std::vector<DocumentAnnotation> docs;  // metadata; regions cleared
  std::map<std::string, std::size_t> doc_index;
  std::map<std::string, std::vector<AnnotationRevision>> history;
  std::vector<AnnotatorAccount> accounts;
  std::map<std::string, std::size_t> account_index;
  std::map<std::string, std::size_t> token_index;
  std::vector<SessionRecord> session_list;
  std::map<std::string, std::size_t> session_index;
  long revision_count = 0;

  void append(const json& event) {
    if (!log.is_open()) return;
    log << event.dump() << '\n';
    log.flush();
    if (!log) throw IoError("cannot append to store log " + log_path->string());
  }

  void apply_annotator(const AnnotatorAccount& a) {
    account_index[a.id] = accounts.size();
    token_index[a.token] = accounts.size();
    accounts.push_back(a);
  }

  void apply_session_open(const SessionRecord& s) {
    session_index[s.id] = session_list.size();
    session_list.push_back(s);
  }

  void apply_revision(const AnnotationRevision& r) {
    auto& h = history[r.doc_id];
    if (r.session_id) {
      auto it = session_index.find(*r.session_id);
      if (it != session_index.end()) {
        SessionRecord& s = session_list[it->second];
        auto pos = std::lower_bound(s.docs_touched.begin(), s.docs_touched.end(), r.doc_id);
        if (pos == s.docs_touched.end() || *pos != r.doc_id) s.docs_touched.insert(pos, r.doc_id);
        const auto [created, edited] = change_counts(h.empty() ? nullptr : &h.back(), r);
        s.regions_created += created;
        s.regions_edited += edited;
      }
    }
    h.push_back(r);
    ++revision_count;
  }

  // Regions new to this revision, split into edits of removed parent regions and
  // genuinely new ones. Regions are compared by class and boundary.
  static std::pair<long, long> change_counts(const AnnotationRevision* prev,
                                             const AnnotationRevision& r) {
    if (!prev || r.mode == RevisionMode::kFresh) return {long(r.regions.size()), 0L};
    std::vector<bool> used(prev->regions.size(), false);
    long unchanged = 0;
    for (const auto& reg : r.regions)
      for (std::size_t i = 0; i < prev->regions.size(); ++i)
        if (!used[i] && same_shape(reg, prev->regions[i])) {
          used[i] = true;
          ++unchanged;
          break;
        }
    const long added = long(r.regions.size()) - unchanged;
    const long removed = long(prev->regions.size()) - unchanged;
    const long edited = std::min(added, removed);
    return {added - edited, edited};
  }

  void replay(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) return;
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) lines.push_back(line);
    for (std::size_t n = 0; n < lines.size(); ++n) {
      json e;
      try {
        e = json::parse(lines[n]);
      } catch (const json::parse_error&) {
        // A torn final line from an interrupted append is dropped.
        if (n + 1 == lines.size()) break;
        throw ParseError("store log line " + std::to_string(n + 1) + " is not valid JSON");
      }
      try {
        const auto kind = e.at("event").get<std::string>();
        if (kind == "annotator") {
          apply_annotator({e.at("id").get<std::string>(), e.at("name").get<std::string>(),
                           e.at("token").get<std::string>(), e.at("at").get<std::int64_t>()});
        } else if (kind == "session_open") {
          SessionRecord s;
          s.id = e.at("id").get<std::string>();
          s.annotator_id = e.at("annotator_id").get<std::string>();
          s.started_at = e.at("at").get<std::int64_t>();
          apply_session_open(s);
        } else if (kind == "session_close") {
          auto it = session_index.find(e.at("id").get<std::string>());
          if (it == session_index.end()) throw ParseError("close of unknown session");
          session_list[it->second].ended_at = e.at("at").get<std::int64_t>();
        } else if (kind == "revision") {
          apply_revision(revision_from_json(e.at("revision")));
        } else {
          throw ParseError("unknown event \"" + kind + "\"");
        }
      } catch (const json::exception& ex) {
        throw ParseError("store log line " + std::to_string(n + 1) + ": " + ex.what());
      }
    }
  }

  std::vector<DocumentAnnotation> current_docs() const {
    std::vector<DocumentAnnotation> out = docs;
    for (auto& d : out) {
      auto it = history.find(d.doc_id);
      if (it != history.end() && !it->second.empty()) d.regions = it->second.back().regions;
    }
    return out;
  }

  const DocumentAnnotation& doc(const std::string& id) const {
    auto it = doc_index.find(id);
    if (it == doc_index.end()) throw NotFoundError("unknown document \"" + id + "\"");
    return docs[it->second];
  }
};

AnnotationStore::AnnotationStore(std::vector<DocumentAnnotation> corpus,
                                 std::optional<std::filesystem::path> log_path, Clock clock)
    : impl_(std::make_unique<Impl>()) {
  impl_->clock = std::move(clock);
  impl_->log_path = log_path;
  std::vector<std::vector<RegionInstance>> imported;
  for (auto& d : corpus) {
    if (impl_->doc_index.count(d.doc_id))
      throw ValidationError("duplicate doc_id \"" + d.doc_id + "\"");
    impl_->doc_index[d.doc_id] = impl_->docs.size();
    imported.push_back(std::move(d.regions));
    d.regions.clear();
    impl_->docs.push_back(std::move(d));
  }
  if (log_path) {
    impl_->replay(*log_path);
    impl_->log.open(*log_path, std::ios::app);
    if (!impl_->log) throw IoError("cannot open store log " + log_path->string());
  }
  for (std::size_t i = 0; i < impl_->docs.size(); ++i) {
    const auto& id = impl_->docs[i].doc_id;
    if (imported[i].empty() || !impl_->history[id].empty()) continue;
    AnnotationRevision r;
    r.doc_id = id;
    r.annotator_id = std::string(kImportAnnotator);
    r.revision = 1;
    r.created_at = impl_->clock();
    r.regions = std::move(imported[i]);
    impl_->append({{"event", "revision"}, {"revision", revision_to_json(r)}});
    impl_->apply_revision(r);
  }
}

AnnotationStore::~AnnotationStore() = default;

AnnotatorAccount AnnotationStore::register_annotator(const std::string& name) {
  if (name.empty()) throw ValidationError("annotator name must be nonempty");
  std::unique_lock lock(impl_->mu);
  AnnotatorAccount a;
  a.id = "a-" + std::to_string(impl_->accounts.size() + 1);
  a.name = name;
  do {
    a.token = random_token();
  } while (impl_->token_index.count(a.token));
  a.registered_at = impl_->clock();
  impl_->append({{"event", "annotator"},
                 {"id", a.id},
                 {"name", a.name},
                 {"token", a.token},
                 {"at", a.registered_at}});
  impl_->apply_annotator(a);
  return a;
}

std::optional<AnnotatorAccount> AnnotationStore::annotator_by_token(const std::string& token) const {
  std::shared_lock lock(impl_->mu);
  auto it = impl_->token_index.find(token);
  if (it == impl_->token_index.end()) return std::nullopt;
  return impl_->accounts[it->second];
}

SessionRecord AnnotationStore::open_session(const std::string& annotator_id) {
  std::unique_lock lock(impl_->mu);
  if (!impl_->account_index.count(annotator_id))
    throw NotFoundError("unknown annotator \"" + annotator_id + "\"");
  SessionRecord s;
  s.id = "s-" + std::to_string(impl_->session_list.size() + 1);
  s.annotator_id = annotator_id;
  s.started_at = impl_->clock();
  impl_->append(
      {{"event", "session_open"}, {"id", s.id}, {"annotator_id", annotator_id}, {"at", s.started_at}});
  impl_->apply_session_open(s);
  return s;
}

SessionRecord AnnotationStore::close_session(const std::string& session_id,
                                             const std::string& annotator_id) {
  std::unique_lock lock(impl_->mu);
  auto it = impl_->session_index.find(session_id);
  if (it == impl_->session_index.end())
    throw NotFoundError("unknown session \"" + session_id + "\"");
  SessionRecord& s = impl_->session_list[it->second];
  if (s.annotator_id != annotator_id)
    throw ConflictError("session \"" + session_id + "\" belongs to another annotator");
  if (!s.open()) throw ConflictError("session \"" + session_id + "\" is already closed");
  // Clock skew must not produce end < start.
  const std::int64_t end = std::max(impl_->clock(), s.started_at);
  impl_->append({{"event", "session_close"}, {"id", session_id}, {"at", end}});
  s.ended_at = end;
  return s;
}

AnnotationRevision AnnotationStore::submit_annotation(const std::string& session_id,
                                                      const std::string& doc_id,
                                                      std::vector<RegionInstance> regions,
                                                      RevisionMode mode) {
  std::unique_lock lock(impl_->mu);
  const DocumentAnnotation& meta = impl_->doc(doc_id);
  auto sit = impl_->session_index.find(session_id);
  if (sit == impl_->session_index.end())
    throw NotFoundError("unknown session \"" + session_id + "\"");
  const SessionRecord& session = impl_->session_list[sit->second];
  if (!session.open()) throw ConflictError("session \"" + session_id + "\" is closed");

  const double w = meta.width;
  const double h = meta.height;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (auto problem = polygon_problem(regions[i].boundary); !problem.empty())
      throw ValidationError("region #" + std::to_string(i) + ": " + problem);
    for (auto& v : regions[i].boundary.vertices) {
      v.x = std::clamp(v.x, 0.0, w);
      v.y = std::clamp(v.y, 0.0, h);
    }
  }

  auto& hist = impl_->history[doc_id];
  if (mode == RevisionMode::kCorrection && hist.empty())
    throw ConflictError("document \"" + doc_id + "\" has no revision to correct");

  AnnotationRevision r;
  r.doc_id = doc_id;
  r.annotator_id = session.annotator_id;
  r.revision = static_cast<int>(hist.size()) + 1;
  if (mode == RevisionMode::kCorrection) r.parent = hist.back().revision;
  r.mode = mode;
  r.session_id = session_id;
  r.created_at = impl_->clock();

  // Regions carried over unchanged from the parent keep their provenance.
  std::vector<bool> used(mode == RevisionMode::kCorrection ? hist.back().regions.size() : 0, false);
  for (auto& reg : regions) {
    bool carried = false;
    for (std::size_t i = 0; i < used.size(); ++i) {
      const auto& old = hist.back().regions[i];
      if (!used[i] && same_shape(reg, old)) {
        used[i] = true;
        reg.annotator_id = old.annotator_id;
        reg.revision = old.revision;
        carried = true;
        break;
      }
    }
    if (!carried) {
      reg.annotator_id = r.annotator_id;
      reg.revision = r.revision;
    }
    reg.score.reset();
  }
  r.regions = std::move(regions);
  impl_->append({{"event", "revision"}, {"revision", revision_to_json(r)}});
  impl_->apply_revision(r);
  return r;
}

bool AnnotationStore::has_document(const std::string& doc_id) const {
  std::shared_lock lock(impl_->mu);
  return impl_->doc_index.count(doc_id) > 0;
}

DocumentAnnotation AnnotationStore::document(const std::string& doc_id) const {
  std::shared_lock lock(impl_->mu);
  DocumentAnnotation d = impl_->doc(doc_id);
  auto it = impl_->history.find(doc_id);
  if (it != impl_->history.end() && !it->second.empty()) d.regions = it->second.back().regions;
  return d;
}

std::optional<AnnotationRevision> AnnotationStore::current_annotation(
    const std::string& doc_id) const {
  std::shared_lock lock(impl_->mu);
  impl_->doc(doc_id);
  auto it = impl_->history.find(doc_id);
  if (it == impl_->history.end() || it->second.empty()) return std::nullopt;
  return it->second.back();
}

std::vector<AnnotationRevision> AnnotationStore::revision_history(const std::string& doc_id) const {
  std::shared_lock lock(impl_->mu);
  impl_->doc(doc_id);
  auto it = impl_->history.find(doc_id);
  if (it == impl_->history.end()) return {};
  return it->second;
}

std::vector<DocumentAnnotation> AnnotationStore::export_corpus() const {
  std::shared_lock lock(impl_->mu);
  return impl_->current_docs();
}

AnalyticsSummary AnnotationStore::analytics_summary() const {
  std::shared_lock lock(impl_->mu);
  const auto current = impl_->current_docs();
  AnalyticsSummary s;
  s.class_counts = compute_region_statistics(current);
  s.revisions = impl_->revision_count;
  for (Collection c : kAllCollections) s.progress[c] = {};
  for (const auto& d : current) {
    auto& p = s.progress[d.collection];
    ++p.total;
    if (!d.regions.empty()) ++p.annotated;
  }
  std::map<std::string, std::set<std::string>> docs_by;
  std::map<std::string, AnnotatorThroughput> by;
  for (const auto& [doc_id, hist] : impl_->history)
    for (std::size_t i = 0; i < hist.size(); ++i) {
      const auto& r = hist[i];
      auto& t = by[r.annotator_id];
      docs_by[r.annotator_id].insert(doc_id);
      ++t.revisions;
      const auto [created, edited] = Impl::change_counts(i ? &hist[i - 1] : nullptr, r);
      t.regions += created + edited;
    }
  for (const auto& a : impl_->accounts) {
    AnnotatorThroughput t = by[a.id];
    t.annotator_id = a.id;
    t.name = a.name;
    t.documents = static_cast<long>(docs_by[a.id].size());
    s.annotators.push_back(t);
  }
  for (const auto& sess : impl_->session_list)
    if (sess.open()) s.open_sessions.push_back(sess);
  return s;
}

std::optional<SessionRecord> AnnotationStore::session(const std::string& session_id) const {
  std::shared_lock lock(impl_->mu);
  auto it = impl_->session_index.find(session_id);
  if (it == impl_->session_index.end()) return std::nullopt;
  return impl_->session_list[it->second];
}

std::vector<SessionRecord> AnnotationStore::sessions() const {
  std::shared_lock lock(impl_->mu);
  return impl_->session_list;
}

std::vector<AnnotatorAccount> AnnotationStore::annotators() const {
  std::shared_lock lock(impl_->mu);
  return impl_->accounts;
}

}  // namespace palm
