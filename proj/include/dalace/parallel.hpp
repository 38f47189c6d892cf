#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace dalace {

// Minimal persistent worker pool. parallel_for splits [0, n) into one
// contiguous chunk per worker; tasks write only to disjoint data, and all
// cross-task reductions happen serially in the caller afterwards. Results
// are therefore bit-identical for any thread count, including 1.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  void set_threads(int n) {
    std::lock_guard<std::mutex> lk(api_mu_);
    if (n < 1) n = 1;
    if (n == threads_) return;
    stop_workers();
    threads_ = n;
    start_workers();
  }

  int threads() const { return threads_; }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& range_fn) {
    if (n <= 0) return;
    std::lock_guard<std::mutex> lk(api_mu_);
    const int nw = threads_;
    if (nw <= 1 || n == 1) {
      range_fn(0, n);
      return;
    }
    const int64_t chunk = (n + nw - 1) / nw;
    {
      std::unique_lock<std::mutex> g(mu_);
      job_fn_ = &range_fn;
      job_n_ = n;
      job_chunk_ = chunk;
      pending_ = 0;
      for (int w = 0; w < nw; ++w) {
        const int64_t lo = int64_t(w) * chunk;
        if (lo < n) ++pending_;
      }
      ++generation_;
      cv_.notify_all();
      done_cv_.wait(g, [&] { return pending_ == 0; });
      job_fn_ = nullptr;
    }
  }

  ~ThreadPool() { stop_workers(); }

 private:
  ThreadPool() { start_workers(); }

  void start_workers() {
    stopping_ = false;
    const int nw = threads_;
    for (int w = 0; w < nw; ++w) {
      workers_.emplace_back([this, w] { worker_loop(w); });
    }
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> g(mu_);
      stopping_ = true;
      ++generation_;
      cv_.notify_all();
    }
    for (auto& t : workers_) t.join();
    workers_.clear();
  }

  void worker_loop(int w) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int64_t, int64_t)>* fn = nullptr;
      int64_t lo = 0, hi = 0;
      {
        std::unique_lock<std::mutex> g(mu_);
        cv_.wait(g, [&] { return stopping_ || generation_ != seen; });
        seen = generation_;
        if (stopping_) return;
        if (!job_fn_) continue;
        lo = int64_t(w) * job_chunk_;
        hi = std::min<int64_t>(lo + job_chunk_, job_n_);
        if (lo >= job_n_) continue;
        fn = job_fn_;
      }
      (*fn)(lo, hi);
      {
        std::lock_guard<std::mutex> g(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex api_mu_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> workers_;
  const std::function<void(int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0, job_chunk_ = 0;
  int pending_ = 0;
  uint64_t generation_ = 0;
  bool stopping_ = false;
  int threads_ = 1;
};

// Per-index convenience wrapper.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  ThreadPool::instance().run(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) fn(i);
  });
}

inline void parallel_ranges(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  ThreadPool::instance().run(n, fn);
}

inline void set_num_threads(int n) { ThreadPool::instance().set_threads(n); }
inline int num_threads() { return ThreadPool::instance().threads(); }

}  // namespace dalace
