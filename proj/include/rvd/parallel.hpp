#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace rvd {

// Worker count: set_threads() > RVD_THREADS env > hardware_concurrency.
// Work is always split into contiguous index blocks, one per worker, and every
// result slot is owned by exactly one worker, so outputs do not depend on the
// number of threads.

inline int& thread_count_ref() {
    static int n = 0;
    return n;
}

inline int thread_count() {
    int n = thread_count_ref();
    if (n > 0) return n;
    if (const char* env = std::getenv("RVD_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

inline void set_threads(int n) { thread_count_ref() = n; }

namespace detail {

class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    // Runs fn(begin, end) on contiguous blocks covering [0, n).
    void run_blocks(std::size_t n, int workers, const std::function<void(std::size_t, std::size_t)>& fn) {
        ensure_workers(workers - 1);
        std::size_t block = (n + workers - 1) / workers;
        {
            std::unique_lock<std::mutex> lk(mu_);
            job_ = &fn;
            job_n_ = n;
            job_block_ = block;
            job_workers_ = workers;
            pending_ = 0;
            for (int w = 1; w < workers; ++w) {
                std::size_t b = static_cast<std::size_t>(w) * block;
                if (b < n) ++pending_;
            }
            ++epoch_;
        }
        cv_.notify_all();
        // worker 0 = caller
        fn(0, std::min(block, n));
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [&] { return pending_ == 0; });
        job_ = nullptr;
    }

private:
    ThreadPool() = default;
    ~ThreadPool() {
        {
            std::unique_lock<std::mutex> lk(mu_);
            stop_ = true;
            ++epoch_;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void ensure_workers(int need) {
        std::unique_lock<std::mutex> lk(mu_);
        while (static_cast<int>(threads_.size()) < need) {
            int id = static_cast<int>(threads_.size()) + 1;
            threads_.emplace_back([this, id] { worker_loop(id); });
        }
    }

    void worker_loop(int id) {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(std::size_t, std::size_t)>* job = nullptr;
            std::size_t b = 0, e = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return epoch_ != seen; });
                seen = epoch_;
                if (stop_) return;
                if (job_ && id < job_workers_) {
                    b = static_cast<std::size_t>(id) * job_block_;
                    if (b < job_n_) {
                        e = std::min(b + job_block_, job_n_);
                        job = job_;
                    }
                }
            }
            if (job) {
                (*job)(b, e);
                std::unique_lock<std::mutex> lk(mu_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    std::vector<std::thread> threads_;
    const std::function<void(std::size_t, std::size_t)>* job_ = nullptr;
    std::size_t job_n_ = 0, job_block_ = 0;
    int job_workers_ = 0;
    int pending_ = 0;
    std::uint64_t epoch_ = 0;
    bool stop_ = false;
};

}  // namespace detail

// fn(i) for i in [0, n), split over contiguous blocks.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
    if (n == 0) return;
    int workers = std::min<std::size_t>(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::function<void(std::size_t, std::size_t)> block_fn = [&fn](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) fn(i);
    };
    detail::ThreadPool::instance().run_blocks(n, workers, block_fn);
}

// fn(worker_index, begin, end); blocks are contiguous and cover [0, n).
// Used where per-worker scratch (private grids) is merged in worker order.
template <class F>
void parallel_blocks(std::size_t n, F&& fn, int* workers_out = nullptr) {
    int workers = static_cast<int>(std::min<std::size_t>(thread_count(), n == 0 ? 1 : n));
    if (workers_out) *workers_out = workers;
    if (n == 0) return;
    if (workers <= 1) {
        fn(0, std::size_t{0}, n);
        return;
    }
    std::size_t block = (n + workers - 1) / workers;
    std::function<void(std::size_t, std::size_t)> block_fn = [&fn, block](std::size_t b, std::size_t e) {
        fn(static_cast<int>(b / block), b, e);
    };
    detail::ThreadPool::instance().run_blocks(n, workers, block_fn);
}

}  // namespace rvd
