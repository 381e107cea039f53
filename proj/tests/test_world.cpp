#include <gtest/gtest.h>

#include <filesystem>

#include "ssta/dataset.hpp"

using namespace ssta;
using namespace ssta::world;

namespace {

RoadMap straight_road() {
  RoadMap m(10, 10);
  m.add_segment({0, 4}, {9, 4});
  m.add_spawn({{0, 4}, Heading::E});
  return m;
}

ViewSpec point_view(int id, int x, int y) { return ViewSpec{id, {x, y}, 1, 1}; }

}  // namespace

TEST(StepWorld, StraightRoadAdvances) {
  auto m = straight_road();
  Rng rng(1);
  WorldState s{0, {Vehicle{0, {3, 4}, Heading::E, 1}}};
  s = step_world(m, s, rng);
  EXPECT_EQ(s.vehicles[0].pos, (Cell{4, 4}));
  EXPECT_EQ(s.t, 1);
}

TEST(StepWorld, EmptyWorldOnlyTicks) {
  auto m = straight_road();
  Rng rng(1);
  auto s = step_world(m, WorldState{5, {}}, rng);
  EXPECT_EQ(s.t, 6);
  EXPECT_TRUE(s.vehicles.empty());
}

TEST(StepWorld, LeavingTheGridRespawns) {
  RoadMap m(10, 10);
  m.add_segment({0, 4}, {9, 4});
  m.add_segment({5, 0}, {5, 9});
  m.add_spawn({{5, 0}, Heading::S});
  Rng rng(2);
  auto s = step_world(m, WorldState{0, {Vehicle{0, {9, 4}, Heading::E, 1}}}, rng);
  EXPECT_EQ(s.vehicles[0].pos, (Cell{5, 0}));
  EXPECT_EQ(s.vehicles[0].heading, Heading::S);
}

TEST(StepWorld, OffRoadVehicleIsAConsistencyFailure) {
  auto m = straight_road();
  Rng rng(3);
  EXPECT_THROW(step_world(m, WorldState{0, {Vehicle{0, {3, 3}, Heading::E, 1}}}, rng), WorldError);
}

TEST(StepWorld, SeededTrajectoryIsReproducible) {
  WorldConfig cfg;
  auto layout = ladder_layout(cfg);
  auto run = [&] {
    Rng rng(42);
    auto s = initial_state(layout.map, cfg.vehicles, 1, rng);
    std::vector<Cell> trace;
    for (int i = 0; i < 100; ++i) {
      s = step_world(layout.map, std::move(s), rng);
      for (const auto& v : s.vehicles) trace.push_back(v.pos);
    }
    return trace;
  };
  EXPECT_EQ(run(), run());
}

TEST(StepWorld, HeadingsStayLegalOnTheLadder) {
  WorldConfig cfg;
  auto layout = ladder_layout(cfg);
  Rng rng(7);
  auto s = initial_state(layout.map, 32, 1, rng);
  for (int i = 0; i < 300; ++i) {
    s = step_world(layout.map, std::move(s), rng);
    for (const auto& v : s.vehicles) {
      ASSERT_TRUE(layout.map.is_road(v.pos));
      const auto ex = layout.map.exits(v.pos);
      if (!layout.map.is_intersection(v.pos)) ASSERT_NE(std::find(ex.begin(), ex.end(), v.heading), ex.end());
    }
  }
}

TEST(RoadMapTest, IntersectionsAndSpawnsAreRoadCells) {
  auto layout = ladder_layout(WorldConfig{});
  for (Cell c : layout.map.intersection_cells()) EXPECT_TRUE(layout.map.is_road(c));
  for (const auto& s : layout.map.spawns()) EXPECT_TRUE(layout.map.is_road(s.cell));
  EXPECT_TRUE(layout.map.is_intersection({24, 20}));   // T junction
  EXPECT_TRUE(layout.map.is_intersection({8, 20}));    // corner
  EXPECT_FALSE(layout.map.is_intersection({30, 20}));  // straight
}

TEST(Render, EmptyWindowEqualsRoadMask) {
  auto m = straight_road();
  ViewSpec v{1, {2, 2}, 5, 5};
  EXPECT_EQ(render(m, WorldState{}, v), road_mask(m, v));
  const auto f = road_mask(m, v);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 5; ++x) EXPECT_EQ(f[y * 5 + x], y == 2 ? kRoad : kBackground);
}

TEST(Render, VehicleAtCenterIsTheOnlyBrightCell) {
  auto m = straight_road();
  ViewSpec v{1, {2, 2}, 5, 5};
  const auto f = render(m, WorldState{0, {Vehicle{0, v.center(), Heading::E, 1}}}, v);
  int bright = 0;
  for (double p : f.data()) {
    bright += p == kVehicle;
    EXPECT_TRUE(p == kVehicle || p == kRoad || p == kBackground);
  }
  EXPECT_EQ(bright, 1);
  EXPECT_EQ(f[2 * 5 + 2], kVehicle);
}

TEST(Render, OverlappingViewsAgreeOnGlobalPosition) {
  auto m = straight_road();
  ViewSpec a{1, {0, 0}, 8, 8}, b{2, {4, 2}, 8, 6};
  WorldState s{0, {Vehicle{0, {6, 4}, Heading::E, 1}, Vehicle{1, {1, 4}, Heading::E, 1}}};
  const auto fa = render(m, s, a), fb = render(m, s, b);
  EXPECT_EQ(fa[4 * 8 + 6], kVehicle);  // local (6,4) in a
  EXPECT_EQ(fb[2 * 6 + 2], kVehicle);  // local (2,2) in b
  EXPECT_EQ(fa[4 * 8 + 1], kVehicle);
  int in_b = 0;
  for (double p : fb.data()) in_b += p == kVehicle;
  EXPECT_EQ(in_b, 1);  // (1,4) is outside b
}

TEST(Topology, LineOfThree) {
  const std::vector<ViewSpec> v{point_view(1, 0, 0), point_view(2, 10, 0), point_view(3, 25, 0)};
  EXPECT_EQ(build_topology(v, 1), (Topology{{1, {2}}, {2, {1}}, {3, {2}}}));
}

TEST(Topology, SquareCornersMatchFourViewGraph) {
  const std::vector<ViewSpec> v{point_view(1, 0, 0), point_view(2, 10, 0), point_view(3, 0, 10),
                                point_view(4, 10, 10)};
  EXPECT_EQ(build_topology(v, 2), (Topology{{1, {2, 3}}, {2, {1, 4}}, {3, {1, 4}}, {4, {2, 3}}}));
}

TEST(Topology, FullAndTieBreaks) {
  auto layout = ladder_layout(WorldConfig{});
  const auto full = build_topology(layout.views, 7);
  for (const auto& [i, k] : full) {
    EXPECT_EQ(k.size(), 7u);
    EXPECT_EQ(std::find(k.begin(), k.end(), i), k.end());
  }
  // equidistant candidates resolve to the lower id
  const std::vector<ViewSpec> v{point_view(1, 0, 0), point_view(2, 5, 0), point_view(3, -5, 0)};
  EXPECT_EQ(build_topology(v, 1).at(1), std::vector<int>{2});
  EXPECT_THROW(build_topology(v, 3), std::invalid_argument);
}

TEST(Topology, ReceiversAreTheReverseEdges) {
  Topology t{{1, {2}}, {2, {1}}, {3, {2}}};
  EXPECT_EQ(receivers_of(t, 2), (std::vector<int>{1, 3}));
  EXPECT_EQ(receivers_of(t, 3), std::vector<int>{});
}

TEST(Transit, ExitsAreFollowedByNeighbourEntries) {
  WorldConfig cfg;
  auto layout = ladder_layout(cfg);
  Rng rng(cfg.seed);
  auto s = initial_state(layout.map, cfg.vehicles, cfg.speed, rng);
  auto view_of = [&](Cell c) {
    for (const auto& v : layout.views)
      if (v.contains(c)) return v.id;
    return 0;
  };
  struct Pending {
    int from;
    long t;
  };
  std::map<int, Pending> open;
  int exits = 0, followed = 0;
  std::vector<int> where(s.vehicles.size());
  for (std::size_t i = 0; i < s.vehicles.size(); ++i) where[i] = view_of(s.vehicles[i].pos);
  for (long t = 1; t <= 1000; ++t) {
    s = step_world(layout.map, std::move(s), rng);
    for (std::size_t i = 0; i < s.vehicles.size(); ++i) {
      const int now = view_of(s.vehicles[i].pos);
      if (now != where[i]) {
        if (where[i] != 0) {
          ++exits;
          open[int(i)] = {where[i], t};
        }
        if (now != 0 && open.contains(int(i))) {
          const auto& p = open[int(i)];
          followed += now != p.from && t - p.t <= cfg.transit_bound;
          open.erase(int(i));
        }
      }
      where[i] = now;
    }
  }
  ASSERT_GT(exits, 100);
  EXPECT_GE(double(followed) / exits, 0.9) << followed << "/" << exits;
}

TEST(Dataset, WriteReadRoundTrip) {
  WorldConfig cfg;
  cfg.views = 2;
  const auto ds = generate_dataset(cfg, 23);
  const auto dir = std::filesystem::temp_directory_path() / "ssta_dataset_roundtrip";
  std::filesystem::remove_all(dir);
  write_dataset(ds, dir, 10);
  EXPECT_TRUE(std::filesystem::exists(dir / "view1_chunk2.tensor"));
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.num_views(), 2u);
  ASSERT_EQ(back.length(), 23u);
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t t = 0; t < 23; ++t) EXPECT_EQ(back.frames[v][t], ds.frames[v][t]);
  EXPECT_EQ(back.views[1].origin, ds.views[1].origin);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, SameSeedSameFrames) {
  WorldConfig cfg;
  cfg.seed = 9;
  const auto a = generate_dataset(cfg, 30), b = generate_dataset(cfg, 30);
  EXPECT_EQ(a.frames, b.frames);
}
