#include "molang/motion_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace molang {

Pose MotionClip::pose_at(int64_t t) const {
  Pose p;
  const float* f = frame(t);
  for (int j = 0; j < kNumJoints; ++j)
    for (int c = 0; c < 6; ++c) p[static_cast<size_t>(j)][static_cast<size_t>(c)] = f[j * 6 + c];
  return p;
}

void MotionClip::set_pose(int64_t t, const Pose& p) {
  float* f = frame(t);
  for (int j = 0; j < kNumJoints; ++j)
    for (int c = 0; c < 6; ++c)
      f[j * 6 + c] = static_cast<float>(p[static_cast<size_t>(j)][static_cast<size_t>(c)]);
}

MotionClip resample(const MotionClip& clip, double target_fps) {
  if (clip.fps <= 0.0) throw std::invalid_argument("resample: non-positive fps");
  if (clip.fps == target_fps) return clip;

  int64_t t_out = std::max<int64_t>(
      1, llround(static_cast<double>(clip.frames) * target_fps / clip.fps));
  MotionClip out;
  out.fps = target_fps;
  out.frames = t_out;
  out.data.assign(static_cast<size_t>(t_out) * kFrameDim, 0.0f);

  double step = clip.fps / target_fps;  // source frames per output frame
  for (int64_t i = 0; i < t_out; ++i) {
    double src = static_cast<double>(i) * step;
    int64_t lo = static_cast<int64_t>(std::floor(src));
    lo = std::clamp<int64_t>(lo, 0, clip.frames - 1);
    int64_t hi = std::min<int64_t>(lo + 1, clip.frames - 1);
    double t = src - static_cast<double>(lo);
    const float* a = clip.frame(lo);
    const float* b = clip.frame(hi);
    float* o = out.frame(i);
    for (int c = 0; c < kFrameDim; ++c)
      o[c] = static_cast<float>((1.0 - t) * a[c] + t * b[c]);
  }
  double scale = target_fps / clip.fps;
  for (const Annotation& an : clip.annotations) {
    Annotation m;
    m.start = std::clamp<int64_t>(llround(static_cast<double>(an.start) * scale), 0, t_out - 1);
    m.end = std::clamp<int64_t>(llround(static_cast<double>(an.end) * scale), m.start + 1, t_out);
    m.text = an.text;
    out.annotations.push_back(std::move(m));
  }
  return out;
}

std::vector<MotionClip> split_windows(const MotionClip& clip, int64_t max_frames) {
  if (clip.frames <= max_frames) return {clip};
  std::vector<MotionClip> out;
  for (int64_t start = 0; start < clip.frames; start += max_frames) {
    int64_t len = std::min(max_frames, clip.frames - start);
    MotionClip w;
    w.fps = clip.fps;
    w.frames = len;
    w.data.assign(clip.data.begin() + start * kFrameDim,
                  clip.data.begin() + (start + len) * kFrameDim);
    for (const Annotation& an : clip.annotations) {
      int64_t s = std::max(an.start, start);
      int64_t e = std::min(an.end, start + len);
      if (s < e) w.annotations.push_back({s - start, e - start, an.text});
    }
    out.push_back(std::move(w));
  }
  return out;
}

MaskSpan sample_mask_span(int64_t t_valid, Rng& rng) {
  if (t_valid < 1) throw std::invalid_argument("sample_mask_span: empty clip");
  int64_t max_len = std::min<int64_t>(kMaxMaskLen, t_valid);
  MaskSpan s;
  s.len = rng.uniform_int(1, max_len);
  s.start = rng.uniform_int(0, t_valid - s.len);
  return s;
}

void apply_mask(std::vector<float>& frames, int64_t t_total, const MaskSpan& span, Rng& rng) {
  if (span.start < 0 || span.len < 1 || span.start + span.len > t_total) {
    throw std::invalid_argument("apply_mask: span out of range");
  }
  for (int64_t t = span.start; t < span.start + span.len; ++t)
    for (int c = 0; c < kFrameDim; ++c)
      frames[static_cast<size_t>(t * kFrameDim + c)] = static_cast<float>(rng.normal());
}

Batch collate(const std::vector<const DataItem*>& items, int64_t max_frames) {
  Batch b;
  b.size = static_cast<int64_t>(items.size());
  b.motion = Tensor::zeros({b.size, max_frames, kFrameDim});
  b.valid.assign(static_cast<size_t>(b.size * max_frames), 0);
  for (int64_t i = 0; i < b.size; ++i) {
    const DataItem* it = items[static_cast<size_t>(i)];
    if (it->frames > max_frames) {
      throw std::invalid_argument("collate: clip of " + std::to_string(it->frames) +
                                  " frames exceeds " + std::to_string(max_frames));
    }
    std::copy(it->motion.begin(), it->motion.end(),
              b.motion.data.begin() + i * max_frames * kFrameDim);
    std::fill_n(b.valid.begin() + i * max_frames, it->frames, uint8_t{1});
    b.length.push_back(it->frames);
    b.items.push_back(it);
  }
  return b;
}

// ---- clip / manifest IO ----

std::string MotionClip::to_json() const {
  json frames_arr = json::array();
  for (int64_t t = 0; t < frames; ++t) {
    json row = json::array();
    for (int c = 0; c < kFrameDim; ++c) row.push_back(frame(t)[c]);
    frames_arr.push_back(std::move(row));
  }
  json ann = json::array();
  for (const Annotation& a : annotations)
    ann.push_back({{"start", a.start}, {"end", a.end}, {"text", a.text}});
  return json{{"fps", fps}, {"frames", frames_arr}, {"annotations", ann}}.dump();
}

MotionClip MotionClip::from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("clip parse error: ") + e.what());
  }
  MotionClip c;
  try {
    c.fps = doc.at("fps").get<double>();
    const auto& frames = doc.at("frames");
    c.frames = static_cast<int64_t>(frames.size());
    if (c.frames < 1) throw ParseError("clip has no frames");
    c.data.reserve(static_cast<size_t>(c.frames) * kFrameDim);
    for (const auto& row : frames) {
      if (row.size() != kFrameDim) throw ParseError("clip frame is not 132-dimensional");
      for (const auto& v : row) c.data.push_back(v.get<float>());
    }
    for (const auto& a : doc.at("annotations")) {
      Annotation an{a.at("start").get<int64_t>(), a.at("end").get<int64_t>(),
                    a.at("text").get<std::string>()};
      if (an.start < 0 || an.end <= an.start || an.end > c.frames) {
        throw ParseError("clip annotation out of range");
      }
      c.annotations.push_back(std::move(an));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("clip structure error: ") + e.what());
  }
  return c;
}

void save_clip(const MotionClip& clip, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << clip.to_json();
  if (!f) throw std::runtime_error("write failed for " + path);
}

MotionClip load_clip(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return MotionClip::from_json(text);
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << json{{"molang_manifest", 1}, {"split", m.split}, {"fingerprint", m.fingerprint}}.dump()
    << "\n";
  for (const ManifestEntry& e : m.entries) {
    f << json{{"path", e.path}, {"annotation", e.annotation}, {"label", e.label}}.dump()
      << "\n";
  }
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open " + path);
  DatasetManifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json doc;
    try {
      doc = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      if (lineno == 1) {
        if (!doc.contains("molang_manifest")) throw ParseError(path + ": missing header line");
        m.split = doc.at("split").get<std::string>();
        m.fingerprint = doc.at("fingerprint").get<std::string>();
      } else {
        ManifestEntry e;
        e.path = doc.at("path").get<std::string>();
        e.annotation = doc.at("annotation").get<int>();
        e.label = doc.value("label", std::string{});
        m.entries.push_back(std::move(e));
      }
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (lineno == 0) throw ParseError(path + ": empty manifest");
  return m;
}

std::string dataset_fingerprint(const std::string& manifest_dir,
                                const std::vector<ManifestEntry>& entries) {
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a 64
  for (const ManifestEntry& e : entries) {
    fs::path p = fs::path(manifest_dir) / e.path;
    std::ifstream f(p, std::ios::binary);
    if (!f) throw ParseError("fingerprint: cannot open " + p.string());
    char buf[4096];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
      for (std::streamsize i = 0; i < f.gcount(); ++i) {
        h ^= static_cast<uint8_t>(buf[i]);
        h *= 0x100000001b3ull;
      }
    }
  }
  char hex[17];
  snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

// ---- synthetic dataset ----

SynthSpec SynthSpec::default_spec() {
  auto prog = [](int joint, Eigen::Vector3d axis, double a0, double a1, double f0, double f1) {
    JointProgram p;
    p.joint = joint;
    p.axis = axis.normalized();
    p.amp_lo = a0;
    p.amp_hi = a1;
    p.freq_lo = f0;
    p.freq_hi = f1;
    return p;
  };
  SynthSpec s;
  // eight kinematically exclusive classes over the SMPL-22 joint indices
  s.classes = {
      {"raise right arm",
       {"a person raises the right arm", "lifting the right hand up", "right arm goes up",
        "someone lifts their right arm overhead"},
       {prog(17, {0, 0, 1}, 0.8, 1.4, 0.3, 0.7), prog(19, {0, 0, 1}, 0.3, 0.6, 0.3, 0.7)}},
      {"raise left arm",
       {"a person raises the left arm", "lifting the left hand up", "left arm goes up",
        "someone lifts their left arm overhead"},
       {prog(16, {0, 0, -1}, 0.8, 1.4, 0.3, 0.7), prog(18, {0, 0, -1}, 0.3, 0.6, 0.3, 0.7)}},
      {"wave",
       {"a person waves the hand", "waving hello with the right hand", "the right hand waves",
        "someone waves at the camera"},
       {prog(19, {1, 0, 0}, 0.5, 0.9, 1.5, 2.5), prog(21, {1, 0, 0}, 0.4, 0.8, 1.5, 2.5)}},
      {"squat",
       {"a person squats down", "bending the knees into a squat", "doing a deep squat",
        "someone crouches down and stands up"},
       {prog(1, {1, 0, 0}, -1.2, -0.7, 0.2, 0.5), prog(2, {1, 0, 0}, -1.2, -0.7, 0.2, 0.5),
        prog(4, {1, 0, 0}, 1.0, 1.6, 0.2, 0.5), prog(5, {1, 0, 0}, 1.0, 1.6, 0.2, 0.5)}},
      {"kick",
       {"a person kicks with the right leg", "kicking forward", "a high kick with one leg",
        "someone performs a front kick"},
       {prog(2, {-1, 0, 0}, 0.9, 1.5, 0.6, 1.2), prog(5, {1, 0, 0}, 0.5, 1.0, 0.6, 1.2)}},
      {"turn",
       {"a person turns around", "turning the whole body", "rotating in place",
        "someone spins their torso"},
       {prog(0, {0, 1, 0}, 1.2, 2.2, 0.15, 0.4), prog(3, {0, 1, 0}, 0.3, 0.6, 0.15, 0.4)}},
      {"jump in place",
       {"a person jumps in place", "jumping up and down", "small hops on the spot",
        "someone bounces on both feet"},
       {prog(4, {1, 0, 0}, 0.4, 0.8, 1.2, 2.0), prog(5, {1, 0, 0}, 0.4, 0.8, 1.2, 2.0),
        prog(7, {-1, 0, 0}, 0.3, 0.6, 1.2, 2.0), prog(8, {-1, 0, 0}, 0.3, 0.6, 1.2, 2.0)}},
      {"bow",
       {"a person bows forward", "bowing at the waist", "a polite bow",
        "someone bends forward in a bow"},
       {prog(3, {1, 0, 0}, 0.5, 0.9, 0.15, 0.4), prog(6, {1, 0, 0}, 0.3, 0.6, 0.15, 0.4),
        prog(9, {1, 0, 0}, 0.2, 0.4, 0.15, 0.4)}},
  };
  return s;
}

SynthSpec SynthSpec::from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidSpecError(std::string("synth spec parse error: ") + e.what());
  }
  SynthSpec s;
  s.clips_per_class = doc.value("clips_per_class", 100);
  s.jitter_std = doc.value("jitter_std", 0.05);
  s.train_fraction = doc.value("train_fraction", 0.8);
  for (const auto& c : doc.at("classes")) {
    MotionClass mc;
    mc.name = c.at("name").get<std::string>();
    for (const auto& t : c.at("templates")) mc.templates.push_back(t.get<std::string>());
    for (const auto& j : c.at("joints")) {
      JointProgram p;
      p.joint = j.at("joint").get<int>();
      if (p.joint < 0 || p.joint >= kNumJoints) throw InvalidSpecError("joint index out of range");
      auto ax = j.at("axis");
      p.axis = Eigen::Vector3d(ax.at(0).get<double>(), ax.at(1).get<double>(),
                               ax.at(2).get<double>())
                   .normalized();
      p.amp_lo = j.at("amp").at(0).get<double>();
      p.amp_hi = j.at("amp").at(1).get<double>();
      p.freq_lo = j.at("freq").at(0).get<double>();
      p.freq_hi = j.at("freq").at(1).get<double>();
      mc.joints.push_back(p);
    }
    s.classes.push_back(std::move(mc));
  }
  return s;
}

namespace {

void validate_spec(const SynthSpec& spec) {
  if (spec.classes.size() < 2) {
    throw InvalidSpecError("synthetic spec needs at least 2 motion classes, got " +
                           std::to_string(spec.classes.size()));
  }
  for (const MotionClass& c : spec.classes) {
    if (c.templates.size() < 3) {
      throw InvalidSpecError("class '" + c.name + "' needs at least 3 phrase templates");
    }
    if (c.joints.empty()) {
      throw InvalidSpecError("class '" + c.name + "' has no joint program");
    }
  }
}

}  // namespace

std::vector<SynthClip> synth_generate(const SynthSpec& spec, uint64_t seed) {
  validate_spec(spec);
  std::vector<SynthClip> out;
  for (size_t ci = 0; ci < spec.classes.size(); ++ci) {
    const MotionClass& cls = spec.classes[ci];
    for (int k = 0; k < spec.clips_per_class; ++k) {
      Rng rng = Rng::stream(seed, 0x5e9, ci, static_cast<uint64_t>(k));
      SynthClip sc;
      sc.label = cls.name;
      sc.class_id = static_cast<int>(ci);
      MotionClip& clip = sc.clip;
      clip.fps = kTargetFps;
      clip.frames = rng.uniform_int(30, kMaxFrames);
      clip.data.assign(static_cast<size_t>(clip.frames) * kFrameDim, 0.0f);

      struct Osc {
        int joint;
        Eigen::Vector3d axis;
        double amp, freq, phase;
      };
      std::vector<Osc> oscs;
      for (const JointProgram& p : cls.joints) {
        oscs.push_back({p.joint, p.axis, rng.uniform(p.amp_lo, p.amp_hi),
                        rng.uniform(p.freq_lo, p.freq_hi), rng.uniform(p.phase_lo, p.phase_hi)});
      }
      for (int64_t t = 0; t < clip.frames; ++t) {
        Pose pose;
        for (int j = 0; j < kNumJoints; ++j) pose[static_cast<size_t>(j)] = identity_6d();
        for (const Osc& o : oscs) {
          double angle =
              o.amp * std::sin(2.0 * M_PI * o.freq * static_cast<double>(t) / kTargetFps +
                               o.phase);
          pose[static_cast<size_t>(o.joint)] =
              matrix_to_6d(axis_angle_to_matrix(o.axis * angle));
        }
        if (spec.jitter_std > 0.0) {
          for (int j = 0; j < kNumJoints; ++j) {
            Eigen::Vector3d jit(rng.normal(), rng.normal(), rng.normal());
            jit *= spec.jitter_std;
            Eigen::Matrix3d r =
                six_d_to_matrix(pose[static_cast<size_t>(j)]) * axis_angle_to_matrix(jit);
            pose[static_cast<size_t>(j)] = matrix_to_6d(r);
          }
        }
        clip.set_pose(t, pose);
      }
      int64_t phrase = rng.uniform_int(0, static_cast<int64_t>(cls.templates.size()) - 1);
      clip.annotations.push_back({0, clip.frames, cls.templates[static_cast<size_t>(phrase)]});
      out.push_back(std::move(sc));
    }
  }
  return out;
}

void synth_split(const SynthSpec& spec, size_t count, uint64_t seed,
                 std::vector<size_t>& train_idx, std::vector<size_t>& test_idx) {
  train_idx.clear();
  test_idx.clear();
  size_t per_class = static_cast<size_t>(spec.clips_per_class);
  for (size_t ci = 0; ci < spec.classes.size(); ++ci) {
    std::vector<size_t> idx(per_class);
    for (size_t k = 0; k < per_class; ++k) idx[k] = ci * per_class + k;
    Rng rng = Rng::stream(seed, 0x511, ci);
    for (size_t k = idx.size(); k > 1; --k) {
      size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(k) - 1));
      std::swap(idx[k - 1], idx[j]);
    }
    size_t n_train = static_cast<size_t>(
        std::llround(spec.train_fraction * static_cast<double>(per_class)));
    for (size_t k = 0; k < idx.size(); ++k) {
      (k < n_train ? train_idx : test_idx).push_back(idx[k]);
    }
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  (void)count;
}

std::pair<std::string, std::string> synth_write_dataset(const SynthSpec& spec, uint64_t seed,
                                                        const std::string& out_dir) {
  std::vector<SynthClip> clips = synth_generate(spec, seed);
  fs::create_directories(fs::path(out_dir) / "clips");
  std::vector<ManifestEntry> entries(clips.size());
  for (size_t i = 0; i < clips.size(); ++i) {
    char name[64];
    snprintf(name, sizeof(name), "clips/clip_%05zu.json", i);
    save_clip(clips[i].clip, (fs::path(out_dir) / name).string());
    entries[i] = {name, 0, clips[i].label};
  }
  std::vector<size_t> train_idx, test_idx;
  synth_split(spec, clips.size(), seed, train_idx, test_idx);

  auto write_split = [&](const std::vector<size_t>& idx, const std::string& split) {
    DatasetManifest m;
    m.split = split;
    for (size_t i : idx) m.entries.push_back(entries[i]);
    m.fingerprint = dataset_fingerprint(out_dir, m.entries);
    std::string path = (fs::path(out_dir) / (split + ".jsonl")).string();
    save_manifest(m, path);
    return path;
  };
  return {write_split(train_idx, "train"), write_split(test_idx, "test")};
}

std::vector<DataItem> load_dataset(const std::string& manifest_path) {
  DatasetManifest m = load_manifest(manifest_path);
  std::string dir = fs::path(manifest_path).parent_path().string();
  std::vector<std::string> labels;
  std::vector<DataItem> items;
  for (const ManifestEntry& e : m.entries) {
    MotionClip clip = load_clip((fs::path(dir) / e.path).string());
    if (clip.fps != kTargetFps) clip = resample(clip);
    for (const MotionClip& w : split_windows(clip)) {
      if (e.annotation >= static_cast<int>(w.annotations.size())) continue;
      const Annotation& an = w.annotations[static_cast<size_t>(e.annotation)];
      if (an.text == "transition") continue;  // transition spans carry no stable semantics
      DataItem item;
      item.frames = an.end - an.start;
      item.motion.assign(w.data.begin() + an.start * kFrameDim,
                         w.data.begin() + an.end * kFrameDim);
      item.text = an.text;
      item.label = e.label;
      auto it = std::find(labels.begin(), labels.end(), e.label);
      if (it == labels.end()) {
        labels.push_back(e.label);
        item.class_id = static_cast<int>(labels.size()) - 1;
      } else {
        item.class_id = static_cast<int>(it - labels.begin());
      }
      items.push_back(std::move(item));
    }
  }
  return items;
}

}  // namespace molang
