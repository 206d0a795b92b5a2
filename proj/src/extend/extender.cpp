// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/extend/extender.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "json.hpp"
#include "occdiff/util/io.hpp"

namespace occdiff::extend {

namespace fs = std::filesystem;

namespace {

constexpr int32_t kCoordBias = 1 << 20;  // packed coordinates span (-2^20, 2^20)

int32_t floor_div(int32_t a, int32_t b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}

struct Frame2D {
  double cx, sx;  // cos/sin of yaw
  double px, py;
};

Frame2D frame_of(const voxel::EgoPose& p) {
  return {std::cos(p.yaw), std::sin(p.yaw), p.x, p.y};
}

// Local voxel-center coordinate of index i on an H-cell axis.
double center_of(int i, int n, double vs) { return (i + 0.5 - n / 2.0) * vs; }

// Nearest voxel index whose center is at local coordinate u.
int index_of(double u, int n, double vs) {
  return static_cast<int>(std::llround(u / vs + n / 2.0 - 0.5));
}

}  // namespace

void FrameGrid::validate() const {
  require(H > 0 && W > 0 && Z > 0, Errc::invalid_argument, "frame grid dims must be positive");
  require(voxel_size_xy > 0 && voxel_size_z > 0, Errc::invalid_argument,
          "voxel sizes must be positive");
}

double OverlapMask::unknown_fraction() const {
  if (voxel_mask.numel() == 0) return 0.0;
  double s = 0.0;
  for (int64_t i = 0; i < voxel_mask.numel(); ++i) s += voxel_mask[i];
  return s / static_cast<double>(voxel_mask.numel());
}

Tensor pool_unknown_any(const Tensor& voxel_mask, int f, int f_z) {
  require(voxel_mask.ndim() == 3, Errc::shape_mismatch, "voxel mask must be [H,W,Z]");
  require(f >= 1 && f_z >= 1, Errc::invalid_argument, "pool factors must be >= 1");
  const int H = voxel_mask.dim(0), W = voxel_mask.dim(1), Z = voxel_mask.dim(2);
  require(H % f == 0 && W % f == 0 && Z % f_z == 0, Errc::shape_mismatch,
          "mask dims must divide by the pool factors");
  Tensor out({H / f, W / f, Z / f_z});
  for (int x = 0; x < H / f; ++x)
    for (int y = 0; y < W / f; ++y)
      for (int z = 0; z < Z / f_z; ++z) {
        float any = 0.0f;
        for (int a = 0; a < f && any == 0.0f; ++a)
          for (int b = 0; b < f && any == 0.0f; ++b)
            for (int c = 0; c < f_z && any == 0.0f; ++c) {
              const float v =
                  voxel_mask[(static_cast<int64_t>(x * f + a) * W + y * f + b) * Z + z * f_z + c];
              require(v == 0.0f || v == 1.0f, Errc::invalid_argument, "mask must be binary");
              any = v;
            }
        out[(static_cast<int64_t>(x) * (W / f) + y) * (Z / f_z) + z] = any;
      }
  return out;
}

OverlapMask project(const voxel::SemanticOccupancyMap& x_t, const voxel::EgoPose& p_t,
                    const voxel::EgoPose& p_next, int f, int f_z) {
  x_t.validate();
  const int H = x_t.H, W = x_t.W, Z = x_t.Z;
  const double vs = x_t.voxel_size_xy;

  OverlapMask om;
  om.voxel_mask = Tensor({H, W, Z});
  om.x_masked = voxel::SemanticOccupancyMap::empty(H, W, Z, x_t.num_classes, x_t.voxel_size_xy,
                                                   x_t.voxel_size_z, x_t.origin);
  const Frame2D next = frame_of(p_next);
  const Frame2D prev = frame_of(p_t);

  for (int i = 0; i < H; ++i) {
    const double lx = center_of(i, H, vs);
    for (int j = 0; j < W; ++j) {
      const double ly = center_of(j, W, vs);
      const double wx = next.px + next.cx * lx - next.sx * ly;
      const double wy = next.py + next.sx * lx + next.cx * ly;
      const double dx = wx - prev.px, dy = wy - prev.py;
      const double ux = prev.cx * dx + prev.sx * dy;
      const double uy = -prev.sx * dx + prev.cx * dy;
      const int si = index_of(ux, H, vs);
      const int sj = index_of(uy, W, vs);
      const bool known = si >= 0 && si < H && sj >= 0 && sj < W;
      for (int k = 0; k < Z; ++k) {
        om.voxel_mask[(static_cast<int64_t>(i) * W + j) * Z + k] = known ? 0.0f : 1.0f;
        if (known) om.x_masked.set(i, j, k, x_t.at(si, sj, k));
      }
    }
  }
  om.latent_mask = pool_unknown_any(om.voxel_mask, f, f_z);
  return om;
}

GlobalScene::GlobalScene(const FrameGrid& grid, int num_classes)
    : grid_(grid), num_classes_(num_classes) {
  grid_.validate();
  require(num_classes >= 2, Errc::invalid_argument, "need at least the empty class plus one");
}

uint64_t GlobalScene::key(int32_t ix, int32_t iy, int32_t iz) {
  require(std::abs(ix) < kCoordBias && std::abs(iy) < kCoordBias && std::abs(iz) < kCoordBias,
          Errc::invalid_argument, "world voxel coordinate out of packed range");
  const uint64_t a = static_cast<uint32_t>(ix + kCoordBias);
  const uint64_t b = static_cast<uint32_t>(iy + kCoordBias);
  const uint64_t c = static_cast<uint32_t>(iz + kCoordBias);
  return (a << 42) | (b << 21) | c;
}

void GlobalScene::unkey(uint64_t k, int32_t& ix, int32_t& iy, int32_t& iz) {
  ix = static_cast<int32_t>((k >> 42) & 0x1FFFFF) - kCoordBias;
  iy = static_cast<int32_t>((k >> 21) & 0x1FFFFF) - kCoordBias;
  iz = static_cast<int32_t>(k & 0x1FFFFF) - kCoordBias;
}

void GlobalScene::merge(const voxel::SemanticOccupancyMap& x_next, const voxel::EgoPose& p_next,
                        bool first_writer_wins) {
  require(x_next.H == grid_.H && x_next.W == grid_.W && x_next.Z == grid_.Z, Errc::invalid_argument,
          "frame dims do not match the scene grid");
  require(x_next.voxel_size_xy == grid_.voxel_size_xy && x_next.voxel_size_z == grid_.voxel_size_z,
          Errc::invalid_argument, "frame voxel sizes do not match the scene grid");
  require(x_next.num_classes == num_classes_, Errc::invalid_argument,
          "frame class count does not match the scene");

  poses_.push_back(p_next);
  const int32_t frame = static_cast<int32_t>(poses_.size()) - 1;
  const Frame2D fr = frame_of(p_next);
  const double vs = grid_.voxel_size_xy;

  for (int i = 0; i < grid_.H; ++i) {
    const double lx = center_of(i, grid_.H, vs);
    for (int j = 0; j < grid_.W; ++j) {
      const double ly = center_of(j, grid_.W, vs);
      const double wx = fr.px + fr.cx * lx - fr.sx * ly;
      const double wy = fr.py + fr.sx * lx + fr.cx * ly;
      const int32_t ix = static_cast<int32_t>(std::floor(wx / vs));
      const int32_t iy = static_cast<int32_t>(std::floor(wy / vs));
      observed_.insert(key(ix, iy, 0));
      for (int k = 0; k < grid_.Z; ++k) {
        const uint8_t label = x_next.at(i, j, k);
        if (label == 0) continue;  // a frame's empty voxels never erase world content
        const uint64_t kk = key(ix, iy, k);
        if (first_writer_wins && cells_.count(kk) != 0) continue;
        cells_[kk] = Cell{label, frame};
      }
    }
  }
}

OverlapMask GlobalScene::render_known(const voxel::EgoPose& p_next, int f, int f_z) const {
  OverlapMask om;
  om.voxel_mask = Tensor({grid_.H, grid_.W, grid_.Z});
  const float ox = -static_cast<float>(grid_.H) / 2 * grid_.voxel_size_xy;
  const float oy = -static_cast<float>(grid_.W) / 2 * grid_.voxel_size_xy;
  om.x_masked = voxel::SemanticOccupancyMap::empty(grid_.H, grid_.W, grid_.Z, num_classes_,
                                                   grid_.voxel_size_xy, grid_.voxel_size_z,
                                                   {ox, oy, 0.0f});
  const Frame2D fr = frame_of(p_next);
  const double vs = grid_.voxel_size_xy;

  for (int i = 0; i < grid_.H; ++i) {
    const double lx = center_of(i, grid_.H, vs);
    for (int j = 0; j < grid_.W; ++j) {
      const double ly = center_of(j, grid_.W, vs);
      const double wx = fr.px + fr.cx * lx - fr.sx * ly;
      const double wy = fr.py + fr.sx * lx + fr.cx * ly;
      const int32_t ix = static_cast<int32_t>(std::floor(wx / vs));
      const int32_t iy = static_cast<int32_t>(std::floor(wy / vs));
      const bool known = observed_.count(key(ix, iy, 0)) != 0;
      for (int k = 0; k < grid_.Z; ++k) {
        om.voxel_mask[(static_cast<int64_t>(i) * grid_.W + j) * grid_.Z + k] = known ? 0.0f : 1.0f;
        if (!known) continue;
        const auto it = cells_.find(key(ix, iy, k));
        if (it != cells_.end()) om.x_masked.set(i, j, k, it->second.label);
      }
    }
  }
  om.latent_mask = pool_unknown_any(om.voxel_mask, f, f_z);
  return om;
}

img::Image GlobalScene::overview(const std::vector<std::array<uint8_t, 3>>& palette) const {
  require(static_cast<int>(palette.size()) >= num_classes_, Errc::invalid_argument,
          "palette smaller than the class count");
  int32_t minx = 0, maxx = 7, miny = 0, maxy = 7;  // all-empty scenes render 8x8 background
  bool first = true;
  auto extend_bounds = [&](uint64_t k) {
    int32_t ix, iy, iz;
    unkey(k, ix, iy, iz);
    if (first) {
      minx = maxx = ix;
      miny = maxy = iy;
      first = false;
    } else {
      minx = std::min(minx, ix);
      maxx = std::max(maxx, ix);
      miny = std::min(miny, iy);
      maxy = std::max(maxy, iy);
    }
  };
  for (uint64_t k : observed_) extend_bounds(k);
  for (const auto& [k, cell] : cells_) extend_bounds(k);

  const auto& bg = palette[0];
  img::Image im = img::Image::filled(maxx - minx + 1, maxy - miny + 1, bg[0], bg[1], bg[2]);
  // Topmost non-empty class per column.
  std::unordered_map<uint64_t, std::pair<int32_t, uint8_t>> top;  // column -> (z, label)
  for (const auto& [k, cell] : cells_) {
    int32_t ix, iy, iz;
    unkey(k, ix, iy, iz);
    const uint64_t col = key(ix, iy, 0);
    auto it = top.find(col);
    if (it == top.end() || iz > it->second.first) top[col] = {iz, cell.label};
  }
  for (const auto& [col, zl] : top) {
    int32_t ix, iy, iz;
    unkey(col, ix, iy, iz);
    const auto& c = palette[zl.second];
    im.set(ix - minx, iy - miny, c[0], c[1], c[2]);
  }
  return im;
}

void GlobalScene::save(const fs::path& dir, int tile_voxels) const {
  require(tile_voxels >= 1, Errc::invalid_argument, "tile size must be >= 1");
  fs::create_directories(dir / "tiles");

  // Deterministic ordering regardless of hash-map iteration order.
  std::vector<uint64_t> cell_keys;
  cell_keys.reserve(cells_.size());
  for (const auto& [k, c] : cells_) cell_keys.push_back(k);
  std::sort(cell_keys.begin(), cell_keys.end());
  std::vector<uint64_t> observed_keys(observed_.begin(), observed_.end());
  std::sort(observed_keys.begin(), observed_keys.end());

  struct TileKey {
    int32_t tx, ty;
    bool operator<(const TileKey& o) const { return tx != o.tx ? tx < o.tx : ty < o.ty; }
  };
  std::map<std::pair<int32_t, int32_t>, voxel::SemanticOccupancyMap> tiles;
  for (uint64_t k : cell_keys) {
    int32_t ix, iy, iz;
    unkey(k, ix, iy, iz);
    require(iz >= 0 && iz < grid_.Z, Errc::invalid_argument, "cell outside the frame z range");
    const int32_t tx = floor_div(ix, tile_voxels), ty = floor_div(iy, tile_voxels);
    auto it = tiles.find({tx, ty});
    if (it == tiles.end()) {
      auto tile = voxel::SemanticOccupancyMap::empty(
          tile_voxels, tile_voxels, grid_.Z, num_classes_, grid_.voxel_size_xy, grid_.voxel_size_z,
          {tx * tile_voxels * grid_.voxel_size_xy, ty * tile_voxels * grid_.voxel_size_xy, 0.0f});
      it = tiles.emplace(std::make_pair(tx, ty), std::move(tile)).first;
    }
    it->second.set(ix - tx * tile_voxels, iy - ty * tile_voxels, iz, cells_.at(k).label);
  }

  std::string manifest;
  for (const auto& [txy, tile] : tiles) {
    char name[64];
    std::snprintf(name, sizeof(name), "tile_%d_%d.socc", txy.first, txy.second);
    voxel::save_socc(dir / "tiles" / name, tile);
    nlohmann::json line{{"tx", txy.first}, {"ty", txy.second}, {"path", std::string("tiles/") + name}};
    manifest += line.dump() + "\n";
  }
  write_text_file(dir / "tiles.jsonl", manifest);
  voxel::save_poselog(dir / "poselog.txt", poses_);

  nlohmann::json meta;
  meta["grid"] = {{"H", grid_.H},
                  {"W", grid_.W},
                  {"Z", grid_.Z},
                  {"voxel_size_xy", grid_.voxel_size_xy},
                  {"voxel_size_z", grid_.voxel_size_z}};
  meta["num_classes"] = num_classes_;
  meta["tile_voxels"] = tile_voxels;
  nlohmann::json observed = nlohmann::json::array();
  for (uint64_t k : observed_keys) {
    int32_t ix, iy, iz;
    unkey(k, ix, iy, iz);
    observed.push_back(ix);
    observed.push_back(iy);
  }
  meta["observed"] = std::move(observed);
  nlohmann::json prov = nlohmann::json::array();
  for (uint64_t k : cell_keys) {
    int32_t ix, iy, iz;
    unkey(k, ix, iy, iz);
    prov.push_back(ix);
    prov.push_back(iy);
    prov.push_back(iz);
    prov.push_back(cells_.at(k).frame);
  }
  meta["provenance"] = std::move(prov);
  write_text_file(dir / "global.json", meta.dump(2) + "\n");
}

GlobalScene GlobalScene::load(const fs::path& dir) {
  const auto meta = nlohmann::json::parse(read_text_file(dir / "global.json"));
  FrameGrid grid;
  grid.H = meta.at("grid").at("H").get<int>();
  grid.W = meta.at("grid").at("W").get<int>();
  grid.Z = meta.at("grid").at("Z").get<int>();
  grid.voxel_size_xy = meta.at("grid").at("voxel_size_xy").get<float>();
  grid.voxel_size_z = meta.at("grid").at("voxel_size_z").get<float>();
  GlobalScene g(grid, meta.at("num_classes").get<int>());
  g.poses_ = voxel::load_poselog(dir / "poselog.txt");

  const auto& observed = meta.at("observed");
  require(observed.size() % 2 == 0, Errc::truncated, "observed list truncated");
  for (size_t i = 0; i < observed.size(); i += 2)
    g.observed_.insert(key(observed[i].get<int32_t>(), observed[i + 1].get<int32_t>(), 0));

  std::unordered_map<uint64_t, int32_t> prov;
  const auto& pj = meta.at("provenance");
  require(pj.size() % 4 == 0, Errc::truncated, "provenance list truncated");
  for (size_t i = 0; i < pj.size(); i += 4)
    prov[key(pj[i].get<int32_t>(), pj[i + 1].get<int32_t>(), pj[i + 2].get<int32_t>())] =
        pj[i + 3].get<int32_t>();

  const int tile_voxels = meta.at("tile_voxels").get<int>();
  std::istringstream manifest(read_text_file(dir / "tiles.jsonl"));
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    const int32_t tx = rec.at("tx").get<int32_t>(), ty = rec.at("ty").get<int32_t>();
    voxel::SemanticOccupancyMap tile = voxel::load_socc(dir / rec.at("path").get<std::string>());
    require(tile.H == tile_voxels && tile.W == tile_voxels && tile.Z == grid.Z, Errc::truncated,
            "tile dims do not match the scene metadata");
    for (int x = 0; x < tile.H; ++x)
      for (int y = 0; y < tile.W; ++y)
        for (int z = 0; z < tile.Z; ++z) {
          const uint8_t label = tile.at(x, y, z);
          if (label == 0) continue;
          const uint64_t k = key(tx * tile_voxels + x, ty * tile_voxels + y, z);
          const auto it = prov.find(k);
          require(it != prov.end(), Errc::truncated, "tile voxel missing provenance");
          g.cells_[k] = Cell{label, it->second};
        }
  }
  require(g.cells_.size() == prov.size(), Errc::truncated,
          "provenance entries without tile voxels");
  return g;
}

voxel::SemanticOccupancyMap extend_frame(diffusion::Denoiser& model, vq::VqVae& autoencoder,
                                         const GlobalScene& g, const voxel::EgoPose& p_next,
                                         const voxel::BEVLayout& bev_next,
                                         const diffusion::NoiseSchedule& ns,
                                         const ExtendParams& params) {
  const auto& dcfg = model.config();
  const auto& acfg = autoencoder.config();
  require(acfg.downsample_factor == dcfg.bev_downsample_factor, Errc::config,
          "autoencoder and denoiser disagree on the horizontal downsample factor");
  require(params.latent_std > 0.0f, Errc::invalid_argument, "latent_std must be positive");
  const int f = acfg.downsample_factor, fz = acfg.z_downsample_factor;
  const FrameGrid& grid = g.grid();

  OverlapMask om;
  if (g.empty()) {
    om.voxel_mask = Tensor({grid.H, grid.W, grid.Z});
    om.voxel_mask.fill(1.0f);
    const float ox = -static_cast<float>(grid.H) / 2 * grid.voxel_size_xy;
    const float oy = -static_cast<float>(grid.W) / 2 * grid.voxel_size_xy;
    om.x_masked = voxel::SemanticOccupancyMap::empty(grid.H, grid.W, grid.Z, g.num_classes(),
                                                     grid.voxel_size_xy, grid.voxel_size_z,
                                                     {ox, oy, 0.0f});
    om.latent_mask = pool_unknown_any(om.voxel_mask, f, fz);
  } else if (params.last_frame_only) {
    const voxel::EgoPose& last = g.poses().back();
    OverlapMask at_last = g.render_known(last, f, fz);
    om = project(at_last.x_masked, last, p_next, f, fz);
  } else {
    om = g.render_known(p_next, f, fz);
  }

  if (!dcfg.mask_conditioning)
    std::fprintf(stderr,
                 "[extend] warning: model has no mask channels; using the plain masked "
                 "replacement baseline\n");

  Tensor z0_known;
  {
    nn::NoGradGuard ng;
    z0_known = autoencoder.encode_quantized(om.x_masked);
  }
  const float inv = 1.0f / params.latent_std;
  for (int64_t i = 0; i < z0_known.numel(); ++i) z0_known[i] *= inv;

  const bool conditional = dcfg.conditioning_mode != diffusion::ConditioningMode::kNone;
  std::optional<diffusion::BEVEmbedding> cond;
  if (conditional) cond = model.embed_bev(bev_next);
  const diffusion::GuidanceConfig* guide =
      params.use_guidance && conditional ? &params.guidance : nullptr;

  Tensor z = diffusion::masked_sample(model, cond ? &*cond : nullptr, om.latent_mask, z0_known,
                                      params.sampler, ns, guide);
  for (int64_t i = 0; i < z.numel(); ++i) z[i] *= params.latent_std;

  nn::NoGradGuard ng;
  return autoencoder.decode_to_map(z, grid.voxel_size_xy, grid.voxel_size_z,
                                   om.x_masked.origin);
}

double seam_disagreement(const voxel::SemanticOccupancyMap& prev, const voxel::EgoPose& p_prev,
                         const voxel::SemanticOccupancyMap& next, const voxel::EgoPose& p_next) {
  require(prev.H == next.H && prev.W == next.W && prev.Z == next.Z, Errc::shape_mismatch,
          "frames must share one grid");
  OverlapMask om = project(prev, p_prev, p_next, 1, 1);
  int64_t counted = 0, differing = 0;
  for (int i = 0; i < next.H; ++i)
    for (int j = 0; j < next.W; ++j) {
      if (om.voxel_mask[(static_cast<int64_t>(i) * next.W + j) * next.Z] != 0.0f) continue;
      const uint8_t a = om.x_masked.at(i, j, 0);
      const uint8_t b = next.at(i, j, 0);
      if (a == 0 && b == 0) continue;
      ++counted;
      differing += a != b;
    }
  return counted == 0 ? 0.0 : static_cast<double>(differing) / static_cast<double>(counted);
}

}  // namespace occdiff::extend
