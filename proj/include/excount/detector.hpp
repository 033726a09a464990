#pragma once

#include <sys/types.h>
#include <csignal>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include <httplib.h>
// <resolv.h> (pulled in by httplib) defines _res, which clashes with Eigen parameter names.
#ifdef _res
#undef _res
#endif
#include <json.hpp>

#include "excount/error.hpp"
#include "excount/geometry.hpp"
#include "excount/image.hpp"
#include "excount/scene.hpp"

namespace excount {

inline constexpr std::string_view kGenericPrompt = "object";

struct DetectionRequest {
  std::string image_ref;          // path or dataset image id
  const Image* image = nullptr;   // optional in-memory pixels
  int width = 0;                  // image bounds used for clipping
  int height = 0;
  std::string prompt;
  double logit_threshold = 0.02;
};

struct DetectionResponse {
  std::vector<ScoredBox> boxes;
  std::string prompt_echo;
  std::string detector_id;
};

// Clamps logits to [0,1], clips boxes to the image, drops degenerate boxes and
// those below threshold, and sorts by (logit desc, area desc, index asc).
inline std::vector<ScoredBox> finalize_boxes(std::vector<ScoredBox> boxes, double threshold, int width,
                                             int height) {
  std::vector<ScoredBox> kept;
  kept.reserve(boxes.size());
  for (auto& b : boxes) {
    b.logit = std::clamp(b.logit, 0.0, 1.0);
    b.box = clip_to(b.box, width, height);
    if (!b.box.valid() || b.logit < threshold) continue;
    kept.push_back(std::move(b));
  }
  std::vector<ScoredBox> sorted;
  sorted.reserve(kept.size());
  for (std::size_t i : rank_by_logit(kept)) sorted.push_back(kept[i]);
  return sorted;
}

inline void validate_request(const DetectionRequest& req) {
  if (req.prompt.empty()) throw UsageError("detection prompt must be nonempty");
  if (!(req.logit_threshold >= 0.0 && req.logit_threshold < 1.0)) {
    throw UsageError("logit threshold must lie in [0,1), got " + std::to_string(req.logit_threshold));
  }
}

// Text-conditioned detector G(image, prompt).
class Detector {
 public:
  virtual ~Detector() = default;
  virtual DetectionResponse detect(const DetectionRequest& request) const = 0;
  virtual std::string id() const = 0;
};

// ---------------------------------------------------------------------------
// Synthetic oracle

struct NoiseSpec {
  double jitter = 0.0;          // box edge jitter, as a fraction of the object radius
  double merge_rate = 0.0;      // per-object probability of merging with its nearest neighbour
  int spurious = 0;             // background false positives per call
  double logit_noise = 0.0;     // stddev of additive logit noise
  std::uint64_t seed = 0;

  friend bool operator==(const NoiseSpec&, const NoiseSpec&) = default;
};

inline void to_json(nlohmann::json& j, const NoiseSpec& n) {
  j = {{"jitter", n.jitter}, {"merge_rate", n.merge_rate}, {"spurious", n.spurious}, {"logit_noise", n.logit_noise},
       {"seed", n.seed}};
}

inline void from_json(const nlohmann::json& j, NoiseSpec& n) {
  n.jitter = j.value("jitter", n.jitter);
  n.merge_rate = j.value("merge_rate", n.merge_rate);
  n.spurious = j.value("spurious", n.spurious);
  n.logit_noise = j.value("logit_noise", n.logit_noise);
  n.seed = j.value("seed", n.seed);
  if (n.jitter < 0 || n.merge_rate < 0 || n.merge_rate > 1 || n.spurious < 0 || n.logit_noise < 0) {
    throw ConfigError("detector noise parameters out of range");
  }
}

inline constexpr double kSpuriousLogitMin = 0.02;
inline constexpr double kSpuriousLogitMax = 0.3;

// Ground-truth boxes for objects matching `prompt` (every object for the generic
// prompt) with seeded corruptions. Per-object draws depend only on the scene, the
// noise seed and the object, so the same object gets the same box under both
// prompts. Boxes are clipped but not thresholded.
inline DetectionResponse synthetic_detect(const SyntheticScene& scene, const std::string& prompt,
                                          const NoiseSpec& noise) {
  if (!scene.valid()) throw UsageError("synthetic scene has objects outside its canvas");
  DetectionResponse resp;
  resp.prompt_echo = prompt;
  resp.detector_id = "synthetic";
  const bool generic = prompt == kGenericPrompt;
  if (!generic && !is_known_shape(prompt)) return resp;

  std::vector<std::size_t> matched;
  for (std::size_t i = 0; i < scene.objects.size(); ++i)
    if (generic || scene.objects[i].class_name == prompt) matched.push_back(i);

  const std::uint64_t base = mix_seed(scene.seed, noise.seed);
  std::vector<ScoredBox> raw;
  std::vector<Box> boxes(matched.size());
  std::vector<double> logits(matched.size());
  for (std::size_t m = 0; m < matched.size(); ++m) {
    const SceneObject& o = scene.objects[matched[m]];
    std::mt19937_64 rng(mix_seed(base, matched[m] + 1));
    std::uniform_real_distribution<double> logit_dist(0.5, 1.0);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    logits[m] = logit_dist(rng);
    const double lnoise = gauss(rng);
    if (noise.logit_noise > 0) logits[m] += noise.logit_noise * lnoise;
    Box b = o.box();
    const double j = noise.jitter * o.radius;
    const double jx0 = unit(rng), jy0 = unit(rng), jx1 = unit(rng), jy1 = unit(rng);
    if (j > 0) {
      b.x_min += j * jx0;
      b.y_min += j * jy0;
      b.x_max += j * jx1;
      b.y_max += j * jy1;
    }
    boxes[m] = b;
  }

  // Merge pass: objects visited in index order; a merging object absorbs its
  // nearest unmerged partner and both are replaced by their union box.
  std::vector<bool> consumed(matched.size(), false);
  for (std::size_t m = 0; m < matched.size(); ++m) {
    if (consumed[m]) continue;
    std::mt19937_64 rng(mix_seed(base ^ 0x6d65726765ull, matched[m] + 1));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const bool merge = noise.merge_rate > 0 && u01(rng) < noise.merge_rate;
    std::size_t partner = matched.size();
    if (merge) {
      double best = 0;
      const SceneObject& a = scene.objects[matched[m]];
      for (std::size_t q = 0; q < matched.size(); ++q) {
        if (q == m || consumed[q]) continue;
        const SceneObject& b = scene.objects[matched[q]];
        const double d = std::hypot(a.cx - b.cx, a.cy - b.cy);
        if (partner == matched.size() || d < best) {
          best = d;
          partner = q;
        }
      }
    }
    consumed[m] = true;
    if (partner < matched.size()) {
      consumed[partner] = true;
      raw.push_back({union_box(boxes[m], boxes[partner]),
                     std::min(1.0, std::max(logits[m], logits[partner]) + 0.02), prompt});
    } else {
      raw.push_back({boxes[m], logits[m], prompt});
    }
  }

  std::mt19937_64 srng(mix_seed(base, hash_string(prompt)));
  std::uniform_real_distribution<double> slogit(kSpuriousLogitMin, kSpuriousLogitMax);
  std::uniform_real_distribution<double> sside(0.1, 0.4);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int s = 0; s < noise.spurious; ++s) {
    const double w = sside(srng) * scene.width;
    const double h = sside(srng) * scene.height;
    const double x = u01(srng) * (scene.width - w);
    const double y = u01(srng) * (scene.height - h);
    raw.push_back({{x, y, x + w, y + h}, slogit(srng), prompt});
  }

  for (auto& b : raw) {
    b.logit = std::clamp(b.logit, 0.0, 1.0);
    b.box = clip_to(b.box, scene.width, scene.height);
    if (b.box.valid()) resp.boxes.push_back(std::move(b));
  }
  return resp;
}

class SyntheticDetector final : public Detector {
 public:
  explicit SyntheticDetector(NoiseSpec noise = {}) : noise_(noise) {}

  void add_scene(const std::string& image_ref, SyntheticScene scene) { scenes_[image_ref] = std::move(scene); }
  const NoiseSpec& noise() const { return noise_; }
  void set_noise(const NoiseSpec& n) { noise_ = n; }

  DetectionResponse detect(const DetectionRequest& req) const override {
    validate_request(req);
    const auto it = scenes_.find(req.image_ref);
    if (it == scenes_.end()) throw UsageError("no synthetic scene registered for '" + req.image_ref + "'");
    DetectionResponse resp = synthetic_detect(it->second, req.prompt, noise_);
    resp.boxes = finalize_boxes(std::move(resp.boxes), req.logit_threshold, it->second.width,
                                it->second.height);
    return resp;
  }

  std::string id() const override { return "synthetic"; }

 private:
  NoiseSpec noise_;
  std::map<std::string, SyntheticScene> scenes_;
};

// ---------------------------------------------------------------------------
// External detector protocol
//
// request:  {"image": str, "prompt": str, "threshold": float}
// response: {"boxes": [{"xyxy": [x0, y0, x1, y1], "logit": float}, ...]}

inline std::string encode_detection_request(const DetectionRequest& req) {
  nlohmann::json j{{"image", req.image_ref}, {"prompt", req.prompt}, {"threshold", req.logit_threshold}};
  return j.dump();
}

inline DetectionResponse parse_external_response(const std::string& raw, int width, int height,
                                                 double threshold, const std::string& prompt = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error& e) {
    throw ProtocolError(std::string("malformed detector reply: ") + e.what());
  }
  if (!j.is_object() || !j.contains("boxes") || !j["boxes"].is_array()) {
    throw ProtocolError("detector reply lacks a \"boxes\" array");
  }
  DetectionResponse resp;
  resp.prompt_echo = j.value("prompt", prompt);
  resp.detector_id = j.value("detector_id", std::string("external"));
  std::vector<ScoredBox> boxes;
  const auto& arr = j["boxes"];
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& rec = arr[i];
    const std::string where = "box record " + std::to_string(i);
    if (!rec.is_object() || !rec.contains("xyxy") || !rec.contains("logit")) {
      throw ProtocolError(where + ": missing \"xyxy\" or \"logit\"");
    }
    const auto& xy = rec["xyxy"];
    if (!xy.is_array() || xy.size() != 4 ||
        !std::all_of(xy.begin(), xy.end(), [](const nlohmann::json& v) { return v.is_number(); })) {
      throw ProtocolError(where + ": \"xyxy\" must hold 4 numbers");
    }
    if (!rec["logit"].is_number()) throw ProtocolError(where + ": \"logit\" must be a number");
    const double logit = rec["logit"].get<double>();
    if (!(logit >= 0.0 && logit <= 1.0)) {
      throw ProtocolError(where + ": logit " + std::to_string(logit) + " outside [0,1]");
    }
    Box b{xy[0].get<double>(), xy[1].get<double>(), xy[2].get<double>(), xy[3].get<double>()};
    if (!b.valid()) throw ProtocolError(where + ": inverted or non-finite box");
    boxes.push_back({b, logit, resp.prompt_echo});
  }
  resp.boxes = finalize_boxes(std::move(boxes), threshold, width, height);
  return resp;
}

namespace detail {

// A long-lived child process speaking one JSON document per line.
class LineProcess {
 public:
  explicit LineProcess(std::string command) : command_(std::move(command)) {}
  LineProcess(const LineProcess&) = delete;
  LineProcess& operator=(const LineProcess&) = delete;
  ~LineProcess() { stop(); }

  std::string roundtrip(const std::string& line) {
    if (pid_ <= 0) start();
    std::string msg = line + "\n";
    if (std::fwrite(msg.data(), 1, msg.size(), to_child_) != msg.size() || std::fflush(to_child_) != 0) {
      stop();
      throw TransportError("detector subprocess '" + command_ + "' closed its input");
    }
    std::string reply;
    int c;
    while ((c = std::fgetc(from_child_)) != EOF && c != '\n') reply.push_back(static_cast<char>(c));
    if (c == EOF && reply.empty()) {
      stop();
      throw TransportError("detector subprocess '" + command_ + "' produced no reply");
    }
    return reply;
  }

 private:
  void start() {
    std::signal(SIGPIPE, SIG_IGN);  // a dead child must surface as a write error
    int in_pipe[2], out_pipe[2];
    if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) throw TransportError("pipe() failed");
    pid_ = fork();
    if (pid_ < 0) throw TransportError("fork() failed");
    if (pid_ == 0) {
      dup2(in_pipe[0], STDIN_FILENO);
      dup2(out_pipe[1], STDOUT_FILENO);
      close(in_pipe[1]);
      close(out_pipe[0]);
      execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    to_child_ = fdopen(in_pipe[1], "w");
    from_child_ = fdopen(out_pipe[0], "r");
  }

  void stop() {
    if (to_child_) std::fclose(to_child_);
    if (from_child_) std::fclose(from_child_);
    to_child_ = from_child_ = nullptr;
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
    }
    pid_ = -1;
  }

  std::string command_;
  pid_t pid_ = -1;
  FILE* to_child_ = nullptr;
  FILE* from_child_ = nullptr;
};

}  // namespace detail

// Out-of-process open-vocabulary detector. Endpoints:
//   "cmd:<shell command>"      persistent subprocess, JSON lines on stdin/stdout
//   "http://host:port/path"    one HTTP POST per request
class ExternalDetector final : public Detector {
 public:
  explicit ExternalDetector(std::string endpoint) : endpoint_(std::move(endpoint)) {
    if (endpoint_.rfind("cmd:", 0) == 0) {
      process_ = std::make_unique<detail::LineProcess>(endpoint_.substr(4));
    } else if (endpoint_.rfind("http://", 0) != 0) {
      throw ConfigError("external detector endpoint must start with cmd: or http://, got '" + endpoint_ + "'");
    }
  }

  DetectionResponse detect(const DetectionRequest& req) const override {
    validate_request(req);
    int w = req.width, h = req.height;
    if (req.image) {
      w = req.image->width;
      h = req.image->height;
    }
    if (w <= 0 || h <= 0) throw UsageError("detection request lacks image bounds");
    const std::string payload = encode_detection_request(req);
    std::string reply;
    {
      std::lock_guard lock(mutex_);
      reply = process_ ? process_->roundtrip(payload) : http_post(payload);
    }
    return parse_external_response(reply, w, h, req.logit_threshold, req.prompt);
  }

  std::string id() const override { return "external:" + endpoint_; }

 private:
  std::string http_post(const std::string& payload) const {
    const std::string rest = endpoint_.substr(7);
    const auto slash = rest.find('/');
    const std::string hostport = rest.substr(0, slash);
    const std::string path = slash == std::string::npos ? "/" : rest.substr(slash);
    httplib::Client cli("http://" + hostport);
    cli.set_connection_timeout(5);
    cli.set_read_timeout(60);
    auto res = cli.Post(path, payload, "application/json");
    if (!res) throw TransportError("detector endpoint " + endpoint_ + " unreachable: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      throw TransportError("detector endpoint " + endpoint_ + " returned HTTP " + std::to_string(res->status));
    }
    return res->body;
  }

  std::string endpoint_;
  mutable std::mutex mutex_;
  std::unique_ptr<detail::LineProcess> process_;
};

inline constexpr const char* kDetectorEndpointEnv = "EXCOUNT_DETECTOR_ENDPOINT";

// Resolves "--detector" values: "synthetic" or "external:<endpoint>". The
// environment variable, when set, overrides the endpoint of an external detector.
inline std::string resolve_detector_endpoint(const std::string& flag) {
  if (flag == "synthetic") return {};
  if (flag.rfind("external", 0) != 0) throw ConfigError("unknown detector '" + flag + "'");
  if (const char* env = std::getenv(kDetectorEndpointEnv); env && *env) return env;
  if (flag.size() <= 9 || flag[8] != ':') throw ConfigError("external detector needs an endpoint");
  return flag.substr(9);
}

}  // namespace excount
