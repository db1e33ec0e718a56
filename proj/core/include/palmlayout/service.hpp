#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "palmlayout/corpus.hpp"

namespace palm {

enum class RevisionMode { kFresh, kCorrection };

std::string_view to_string(RevisionMode m);
std::optional<RevisionMode> revision_mode_from_string(std::string_view s);

struct AnnotatorAccount {
  std::string id;
  std::string name;
  std::string token;  // bearer token issued at registration
  std::int64_t registered_at = 0;
};

struct AnnotationRevision {
  std::string doc_id;
  std::string annotator_id;
  int revision = 0;
  std::optional<int> parent;  // set for corrections
  RevisionMode mode = RevisionMode::kFresh;
  std::optional<std::string> session_id;
  std::int64_t created_at = 0;
  std::vector<RegionInstance> regions;
};

struct SessionRecord {
  std::string id;
  std::string annotator_id;
  std::int64_t started_at = 0;
  std::optional<std::int64_t> ended_at;
  std::vector<std::string> docs_touched;  // sorted, unique
  long regions_created = 0;
  long regions_edited = 0;

  bool open() const { return !ended_at.has_value(); }
};

struct AnnotatorThroughput {
  std::string annotator_id;
  std::string name;
  long documents = 0;  // distinct documents with a revision by this annotator
  long revisions = 0;
  long regions = 0;    // regions created or edited
};

struct CollectionProgress {
  long annotated = 0;  // documents with a non-empty current revision
  long total = 0;
};

struct AnalyticsSummary {
  RegionStatistics class_counts;  // over current revisions
  std::vector<AnnotatorThroughput> annotators;
  std::vector<SessionRecord> open_sessions;
  std::map<Collection, CollectionProgress> progress;
  long revisions = 0;
};

// Milliseconds since the epoch.
using Clock = std::function<std::int64_t()>;
Clock system_clock_ms();

/// Revisioned annotation state over a fixed document set.
///
/// Every mutation is appended to a JSON-lines log before it becomes visible;
/// constructing a store over an existing log replays it. Documents that arrive
/// with regions and have no history are imported as revision 1 by "import".
class AnnotationStore {
 public:
  static constexpr std::string_view kImportAnnotator = "import";

  explicit AnnotationStore(std::vector<DocumentAnnotation> corpus,
                           std::optional<std::filesystem::path> log_path = std::nullopt,
                           Clock clock = system_clock_ms());
  ~AnnotationStore();

  AnnotationStore(const AnnotationStore&) = delete;
  AnnotationStore& operator=(const AnnotationStore&) = delete;

  // Throws ValidationError for an empty name. Duplicate names get distinct ids.
  AnnotatorAccount register_annotator(const std::string& name);
  std::optional<AnnotatorAccount> annotator_by_token(const std::string& token) const;

  SessionRecord open_session(const std::string& annotator_id);
  // Throws NotFoundError, or ConflictError if the session is already closed or
  // belongs to someone else.
  SessionRecord close_session(const std::string& session_id, const std::string& annotator_id);

  /// Appends the next revision of `doc_id`. Corrections need a prior revision
  /// (ConflictError otherwise) and record it as parent. Invalid regions raise
  /// ValidationError naming the region index; out-of-image vertices are clamped.
  AnnotationRevision submit_annotation(const std::string& session_id, const std::string& doc_id,
                                       std::vector<RegionInstance> regions, RevisionMode mode);

  bool has_document(const std::string& doc_id) const;
  // Throws NotFoundError for unknown documents.
  DocumentAnnotation document(const std::string& doc_id) const;
  std::optional<AnnotationRevision> current_annotation(const std::string& doc_id) const;
  std::vector<AnnotationRevision> revision_history(const std::string& doc_id) const;

  // Corpus order with current regions.
  std::vector<DocumentAnnotation> export_corpus() const;
  AnalyticsSummary analytics_summary() const;
  std::optional<SessionRecord> session(const std::string& session_id) const;
  std::vector<SessionRecord> sessions() const;
  std::vector<AnnotatorAccount> annotators() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Transport-independent request handling for the HTTP API.
struct HttpRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> headers;  // lower-case names
  std::string body;
};

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

class AnnotationService {
 public:
  // Images are served from `corpus_dir` joined with each document's image_path.
  AnnotationService(AnnotationStore& store, std::filesystem::path corpus_dir);

  HttpResponse handle(const HttpRequest& request) const;

 private:
  AnnotationStore& store_;
  std::filesystem::path corpus_dir_;
};

/// Blocking HTTP listener around an AnnotationService.
class HttpServer {
 public:
  explicit HttpServer(const AnnotationService& service);
  ~HttpServer();

  // Binds `host:port` (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  // Serves until stop(). Call after bind().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Loads `<corpus_dir>/corpus.json` and serves it on `port` until interrupted.
void run_annotation_server(const std::filesystem::path& corpus_dir,
                           const std::filesystem::path& store_path, const std::string& host,
                           int port);

}  // namespace palm
