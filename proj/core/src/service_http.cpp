#include <algorithm>
#include <cctype>
#include <fstream>
#include <iostream>
#include <sstream>

#include "httplib.h"
#include "json_codec.hpp"
#include "palmlayout/errors.hpp"
#include "palmlayout/service.hpp"

namespace palm {

using nlohmann::json;

namespace {

class HttpError : public std::runtime_error {
 public:
  HttpError(int status, const std::string& msg) : std::runtime_error(msg), status(status) {}
  int status;
};

HttpResponse json_response(int status, const json& body) {
  return {status, "application/json", body.dump(2) + "\n"};
}

HttpResponse error_response(int status, const std::string& msg) {
  return json_response(status, {{"error", msg}, {"status", status}});
}

std::vector<std::string> split_path(std::string_view path) {
  if (auto q = path.find('?'); q != std::string_view::npos) path = path.substr(0, q);
  std::vector<std::string> parts;
  std::size_t i = 0;
  while (i < path.size()) {
    while (i < path.size() && path[i] == '/') ++i;
    std::size_t j = i;
    while (j < path.size() && path[j] != '/') ++j;
    if (j > i) parts.emplace_back(path.substr(i, j - i));
    i = j;
  }
  return parts;
}

json account_json(const AnnotatorAccount& a, bool with_token) {
  json j{{"annotator_id", a.id}, {"name", a.name}, {"registered_at", a.registered_at}};
  if (with_token) j["token"] = a.token;
  return j;
}

json session_json(const SessionRecord& s) {
  return {{"session_id", s.id},
          {"annotator_id", s.annotator_id},
          {"started_at", s.started_at},
          {"ended_at", s.ended_at ? json(*s.ended_at) : json(nullptr)},
          {"open", s.open()},
          {"docs_touched", s.docs_touched},
          {"regions_created", s.regions_created},
          {"regions_edited", s.regions_edited}};
}

json counts_json(const ClassCounts& counts) {
  json j = json::object();
  for (RegionClass c : kAllRegionClasses) j[std::string(abbreviation(c))] = counts[index_of(c)];
  return j;
}

json parse_body(const std::string& body) {
  try {
    return json::parse(body);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("request body is not valid JSON: ") + e.what());
  }
}

std::string content_type_for(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".tif" || ext == ".tiff") return "image/tiff";
  return "application/octet-stream";
}

}  // namespace

AnnotationService::AnnotationService(AnnotationStore& store, std::filesystem::path corpus_dir)
    : store_(store), corpus_dir_(std::move(corpus_dir)) {}

HttpResponse AnnotationService::handle(const HttpRequest& req) const {
  const auto parts = split_path(req.path);
  const std::string& m = req.method;

  auto authenticate = [&]() -> AnnotatorAccount {
    auto it = req.headers.find("authorization");
    const std::string prefix = "Bearer ";
    if (it == req.headers.end() || !it->second.starts_with(prefix))
      throw HttpError(401, "missing bearer token");
    auto account = store_.annotator_by_token(it->second.substr(prefix.size()));
    if (!account) throw HttpError(401, "unknown token");
    return *account;
  };

  try {
    if (m == "OPTIONS") return {204, "text/plain", ""};

    if (parts.size() == 1 && parts[0] == "annotators" && m == "POST") {
      const json body = parse_body(req.body);
      if (!body.is_object() || !body.contains("name") || !body["name"].is_string())
        throw ValidationError("body must be an object with a string \"name\"");
      return json_response(201, account_json(store_.register_annotator(body["name"]), true));
    }

    if (parts.size() == 1 && parts[0] == "sessions" && m == "POST") {
      const auto account = authenticate();
      return json_response(201, session_json(store_.open_session(account.id)));
    }
    if (parts.size() == 2 && parts[0] == "sessions" && m == "DELETE") {
      const auto account = authenticate();
      return json_response(200, session_json(store_.close_session(parts[1], account.id)));
    }

    if (parts.size() == 1 && parts[0] == "documents" && m == "GET") {
      json docs = json::array();
      for (const auto& d : store_.export_corpus()) {
        const auto cur = store_.current_annotation(d.doc_id);
        docs.push_back({{"doc_id", d.doc_id},
                        {"image_path", d.image_path},
                        {"width", d.width},
                        {"height", d.height},
                        {"collection", to_string(d.collection)},
                        {"script", d.script},
                        {"regions", d.regions.size()},
                        {"current_revision", cur ? json(cur->revision) : json(nullptr)}});
      }
      return json_response(200, {{"documents", docs}});
    }

    if (parts.size() == 3 && parts[0] == "documents") {
      const std::string& id = parts[1];
      if (parts[2] == "image" && m == "GET") {
        const DocumentAnnotation d = store_.document(id);
        const auto root = std::filesystem::weakly_canonical(corpus_dir_);
        const auto file = std::filesystem::weakly_canonical(corpus_dir_ / d.image_path);
        const auto rel = file.lexically_relative(root);
        if (rel.empty() || *rel.begin() == "..")
          throw HttpError(403, "image path escapes the corpus directory");
        std::ifstream in(file, std::ios::binary);
        if (!in) throw NotFoundError("image for \"" + id + "\" is missing");
        std::ostringstream ss;
        ss << in.rdbuf();
        return {200, content_type_for(file), ss.str()};
      }
      if (parts[2] == "annotation" && m == "GET") {
        const auto cur = store_.current_annotation(id);
        if (!cur)
          return json_response(200, {{"doc_id", id},
                                     {"revision", nullptr},
                                     {"parent", nullptr},
                                     {"mode", nullptr},
                                     {"annotator_id", nullptr},
                                     {"session_id", nullptr},
                                     {"created_at", nullptr},
                                     {"regions", json::array()}});
        return json_response(200, detail::revision_to_json(*cur));
      }
      if (parts[2] == "history" && m == "GET") {
        json revs = json::array();
        for (const auto& r : store_.revision_history(id)) revs.push_back(detail::revision_to_json(r));
        return json_response(200, {{"doc_id", id}, {"revisions", revs}});
      }
      if (parts[2] == "annotation" && m == "PUT") {
        const auto account = authenticate();
        if (!store_.has_document(id)) throw NotFoundError("unknown document \"" + id + "\"");
        json body = parse_body(req.body);
        if (!body.is_object()) throw ParseError("body must be an object");
        if (!body.contains("session_id") || !body["session_id"].is_string())
          throw ParseError("missing string \"session_id\"");
        const std::string session_id = body["session_id"];
        const auto session = store_.session(session_id);
        if (!session) throw NotFoundError("unknown session \"" + session_id + "\"");
        if (session->annotator_id != account.id)
          throw HttpError(403, "session belongs to another annotator");
        std::optional<RevisionMode> mode = RevisionMode::kFresh;
        if (body.contains("mode")) {
          if (!body["mode"].is_string()) throw ParseError("\"mode\" must be a string");
          mode = revision_mode_from_string(body["mode"].get<std::string>());
          if (!mode) throw ParseError("\"mode\" must be \"fresh\" or \"correction\"");
        }
        if (!body.contains("regions") || !body["regions"].is_array())
          throw ParseError("\"regions\" must be an array");
        std::vector<RegionInstance> regions;
        auto& arr = body["regions"];
        for (std::size_t i = 0; i < arr.size(); ++i) {
          // Revision numbers are assigned by the server.
          if (arr[i].is_object() && !arr[i].contains("revision")) arr[i]["revision"] = 0;
          try {
            regions.push_back(detail::region_from_json(arr[i], "region #" + std::to_string(i)));
          } catch (const ParseError& e) {
            throw ValidationError(e.what());
          }
        }
        const auto rev = store_.submit_annotation(session_id, id, std::move(regions), *mode);
        return json_response(201, detail::revision_to_json(rev));
      }
    }

    if (parts.size() == 2 && parts[0] == "analytics" && m == "GET") {
      if (parts[1] == "summary") {
        const auto s = store_.analytics_summary();
        json per_collection = json::object();
        for (Collection c : kAllCollections) {
          auto it = s.class_counts.per_collection.find(c);
          per_collection[std::string(to_string(c))] =
              counts_json(it == s.class_counts.per_collection.end() ? ClassCounts{} : it->second);
        }
        json annotators = json::array();
        for (const auto& a : s.annotators)
          annotators.push_back({{"annotator_id", a.annotator_id},
                                {"name", a.name},
                                {"documents", a.documents},
                                {"revisions", a.revisions},
                                {"regions", a.regions}});
        json open = json::array();
        for (const auto& sess : s.open_sessions) open.push_back(session_json(sess));
        json progress = json::object();
        for (const auto& [c, p] : s.progress)
          progress[std::string(to_string(c))] = {{"annotated", p.annotated}, {"total", p.total}};
        return json_response(200, {{"revisions", s.revisions},
                                   {"class_counts",
                                    {{"combined", counts_json(s.class_counts.combined)},
                                     {"per_collection", per_collection}}},
                                   {"annotators", annotators},
                                   {"open_sessions", open},
                                   {"progress", progress}});
      }
      if (parts[1] == "sessions") {
        json all = json::array();
        for (const auto& sess : store_.sessions()) all.push_back(session_json(sess));
        return json_response(200, {{"sessions", all}});
      }
    }

    if (parts.size() == 1 && parts[0] == "export" && m == "GET") {
      const auto docs = store_.export_corpus();
      return {200, "application/json", serialize_annotations(docs)};
    }

    return error_response(404, "no route for " + m + " " + req.path);
  } catch (const HttpError& e) {
    return error_response(e.status, e.what());
  } catch (const ParseError& e) {
    return error_response(400, e.what());
  } catch (const ValidationError& e) {
    return error_response(422, e.what());
  } catch (const NotFoundError& e) {
    return error_response(404, e.what());
  } catch (const ConflictError& e) {
    return error_response(409, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

struct HttpServer::Impl {
  const AnnotationService& service;
  httplib::Server server;
  explicit Impl(const AnnotationService& s) : service(s) {}
};

HttpServer::HttpServer(const AnnotationService& service) : impl_(std::make_unique<Impl>(service)) {
  auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    HttpRequest r;
    r.method = req.method;
    r.path = req.path;
    r.body = req.body;
    for (const auto& [k, v] : req.headers) {
      std::string key = k;
      std::transform(key.begin(), key.end(), key.begin(),
                     [](unsigned char c) { return std::tolower(c); });
      r.headers[key] = v;
    }
    const HttpResponse out = impl_->service.handle(r);
    res.status = out.status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, DELETE, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Authorization, Content-Type");
    res.set_content(out.body, out.content_type);
  };
  auto& s = impl_->server;
  s.Get(".*", handler);
  s.Post(".*", handler);
  s.Put(".*", handler);
  s.Delete(".*", handler);
  s.Options(".*", handler);
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw IoError("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port))
    throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

void run_annotation_server(const std::filesystem::path& corpus_dir,
                           const std::filesystem::path& store_path, const std::string& host,
                           int port) {
  auto docs = parse_annotation_file(corpus_dir / "corpus.json");
  AnnotationStore store(std::move(docs), store_path);
  AnnotationService service(store, corpus_dir);
  HttpServer server(service);
  const int bound = server.bind(host, port);
  std::cout << "listening on http://" << host << ":" << bound << std::endl;
  server.listen();
}

}  // namespace palm
